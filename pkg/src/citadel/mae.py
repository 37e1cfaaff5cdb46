"""Small convolutional masked autoencoder with hand-written backpropagation.

Tensors are kept channel-last as ``(batch, pixels, channels)``. Every 3x3,
stride-2, padding-1 convolution is expressed through a constant 0/1 gather
matrix, so a convolution is a gather followed by a matmul and its transpose
(used both by the decoder and by backprop) is the matching scatter.
"""

from __future__ import annotations

import csv
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

MAGIC = b"CTDL"
FORMAT_VERSION = 1

PARAM_ORDER = (
    "enc1.w", "enc1.b", "enc2.w", "enc2.b", "enc_fc.w", "enc_fc.b",
    "dec_fc.w", "dec_fc.b", "dec1.w", "dec1.b", "dec2.w", "dec2.b",
)

ENC_CHANNELS = (8, 16)


class TrainingDivergence(RuntimeError):
    pass


def _down(size: int) -> int:
    return (size + 1) // 2


def gather_matrix(big: int) -> np.ndarray:
    """0/1 matrix G with ``x_flat @ G`` giving the 3x3/stride-2/pad-1 patches of a big x big map.

    Columns are ordered (output pixel, tap); padded taps stay all-zero.
    """
    small = _down(big)
    G = np.zeros((big * big, small * small * 9))
    for pr in range(small):
        for pc in range(small):
            p = pr * small + pc
            for dr in range(3):
                for dc in range(3):
                    r, c = 2 * pr - 1 + dr, 2 * pc - 1 + dc
                    if 0 <= r < big and 0 <= c < big:
                        G[r * big + c, p * 9 + dr * 3 + dc] = 1.0
    return G


def _im2col(x: np.ndarray, G: np.ndarray) -> np.ndarray:
    # (B, HW, C) -> (B, P, 9*C), column index = tap * C + channel
    B, _, C = x.shape
    cols = x.transpose(0, 2, 1) @ G
    P = G.shape[1] // 9
    return cols.reshape(B, C, P, 9).transpose(0, 2, 3, 1).reshape(B, P, 9 * C)


def _col2im(cols: np.ndarray, G: np.ndarray, C: int) -> np.ndarray:
    # adjoint of _im2col: (B, P, 9*C) -> (B, HW, C)
    B, P, _ = cols.shape
    t = cols.reshape(B, P, 9, C).transpose(0, 3, 1, 2).reshape(B, C, P * 9)
    return (t @ G.T).transpose(0, 2, 1)


def _act(z: np.ndarray) -> np.ndarray:
    # ELU(alpha=1)
    return np.where(z > 0, z, np.expm1(np.minimum(z, 0.0)))


def _act_grad(z: np.ndarray) -> np.ndarray:
    return np.where(z > 0, 1.0, np.exp(np.minimum(z, 0.0)))


@dataclass
class MaeModel:
    grid_dim: int
    latent_dim: int
    params: dict[str, np.ndarray]
    _geometry: tuple[np.ndarray, np.ndarray] | None = field(default=None, repr=False, compare=False)

    @property
    def geometry(self) -> tuple[np.ndarray, np.ndarray]:
        if self._geometry is None:
            self._geometry = (gather_matrix(self.grid_dim), gather_matrix(_down(self.grid_dim)))
        return self._geometry

    @property
    def bottleneck_size(self) -> int:
        return ENC_CHANNELS[1] * _down(_down(self.grid_dim)) ** 2

    def copy(self) -> "MaeModel":
        return MaeModel(self.grid_dim, self.latent_dim, {k: v.copy() for k, v in self.params.items()}, self._geometry)

    def n_parameters(self) -> int:
        return sum(v.size for v in self.params.values())

    def to_bytes(self) -> bytes:
        chunks = [struct.pack("<4sIII", MAGIC, FORMAT_VERSION, self.grid_dim, self.latent_dim)]
        for name in PARAM_ORDER:
            arr = np.ascontiguousarray(self.params[name], dtype="<f8")
            chunks.append(struct.pack("<I", arr.ndim))
            chunks.append(struct.pack(f"<{arr.ndim}I", *arr.shape))
            chunks.append(arr.tobytes(order="C"))
        return b"".join(chunks)

    @classmethod
    def from_bytes(cls, blob: bytes) -> "MaeModel":
        magic, version, grid_dim, latent_dim = struct.unpack_from("<4sIII", blob, 0)
        if magic != MAGIC:
            raise ValueError("not a model snapshot (bad magic)")
        if version != FORMAT_VERSION:
            raise ValueError(f"unsupported snapshot version {version}")
        offset = struct.calcsize("<4sIII")
        params = {}
        for name in PARAM_ORDER:
            (rank,) = struct.unpack_from("<I", blob, offset)
            offset += 4
            shape = struct.unpack_from(f"<{rank}I", blob, offset)
            offset += 4 * rank
            count = int(np.prod(shape)) if rank else 1
            params[name] = np.frombuffer(blob, dtype="<f8", count=count, offset=offset).reshape(shape).astype(np.float64)
            offset += 8 * count
        return cls(grid_dim, latent_dim, params)

    def save(self, path: str | Path) -> None:
        Path(path).write_bytes(self.to_bytes())

    @classmethod
    def load(cls, path: str | Path) -> "MaeModel":
        return cls.from_bytes(Path(path).read_bytes())


def _param_shapes(grid_dim: int, latent_dim: int) -> dict[str, tuple[tuple[int, ...], int, int]]:
    c1, c2 = ENC_CHANNELS
    flat = c2 * _down(_down(grid_dim)) ** 2
    # name -> (shape, fan_in, fan_out)
    return {
        "enc1.w": ((c1, 9), 9, 9 * c1),
        "enc2.w": ((c2, 9 * c1), 9 * c1, 9 * c2),
        "enc_fc.w": ((latent_dim, flat), flat, latent_dim),
        "dec_fc.w": ((flat, latent_dim), latent_dim, flat),
        "dec1.w": ((9 * c1, c2), 9 * c2, 9 * c1),
        "dec2.w": ((9, c1), 9 * c1, 9),
    }


def init_mae(grid_dim: int = 8, latent_dim: int = 16, seed: int = 0) -> MaeModel:
    if grid_dim < 4:
        raise ValueError("grid_dim must be at least 4")
    if latent_dim < 1:
        raise ValueError("latent_dim must be at least 1")
    rng = np.random.default_rng(seed)
    c1, c2 = ENC_CHANNELS
    flat = c2 * _down(_down(grid_dim)) ** 2
    bias_sizes = {"enc1.b": c1, "enc2.b": c2, "enc_fc.b": latent_dim, "dec_fc.b": flat, "dec1.b": c1, "dec2.b": 1}
    shapes = _param_shapes(grid_dim, latent_dim)
    params = {}
    for name in PARAM_ORDER:
        if name in bias_sizes:
            params[name] = np.zeros(bias_sizes[name])
        else:
            shape, fan_in, fan_out = shapes[name]
            bound = np.sqrt(6.0 / (fan_in + fan_out))
            params[name] = rng.uniform(-bound, bound, size=shape)
    return MaeModel(grid_dim, latent_dim, params)


def _forward(model: MaeModel, x: np.ndarray) -> tuple[np.ndarray, np.ndarray, dict]:
    """x: (B, HW) in [0,1]. Returns (latent, reconstruction (B, HW), cache)."""
    p = model.params
    G1, G2 = model.geometry
    c1, c2 = ENC_CHANNELS
    B = x.shape[0]
    x0 = x[:, :, None]
    col1 = _im2col(x0, G1)
    z1 = col1 @ p["enc1.w"].T + p["enc1.b"]
    a1 = _act(z1)
    col2 = _im2col(a1, G2)
    z2 = col2 @ p["enc2.w"].T + p["enc2.b"]
    a2 = _act(z2)
    h = a2.reshape(B, -1)
    latent = h @ p["enc_fc.w"].T + p["enc_fc.b"]

    zd = latent @ p["dec_fc.w"].T + p["dec_fc.b"]
    ad = _act(zd)
    ad3 = ad.reshape(B, -1, c2)
    zt1 = _col2im(ad3 @ p["dec1.w"].T, G2, c1) + p["dec1.b"]
    at1 = _act(zt1)
    recon = _col2im(at1 @ p["dec2.w"].T, G1, 1)[:, :, 0] + p["dec2.b"][0]
    cache = dict(col1=col1, z1=z1, a1=a1, col2=col2, z2=z2, h=h, latent=latent, zd=zd, ad3=ad3, zt1=zt1, at1=at1)
    return latent, recon, cache


def _backward(model: MaeModel, cache: dict, d_recon: np.ndarray) -> dict[str, np.ndarray]:
    p = model.params
    G1, G2 = model.geometry
    c1, c2 = ENC_CHANNELS
    B = d_recon.shape[0]
    g: dict[str, np.ndarray] = {}

    g["dec2.b"] = np.array([d_recon.sum()])
    d_cols = _im2col(d_recon[:, :, None], G1)
    g["dec2.w"] = np.einsum("bpk,bpc->kc", d_cols, cache["at1"])
    d_zt1 = (d_cols @ p["dec2.w"]) * _act_grad(cache["zt1"])
    g["dec1.b"] = d_zt1.sum(axis=(0, 1))
    d_cols = _im2col(d_zt1, G2)
    g["dec1.w"] = np.einsum("bpk,bpc->kc", d_cols, cache["ad3"])
    d_zd = (d_cols @ p["dec1.w"]).reshape(B, -1) * _act_grad(cache["zd"])
    g["dec_fc.b"] = d_zd.sum(axis=0)
    g["dec_fc.w"] = d_zd.T @ cache["latent"]
    d_latent = d_zd @ p["dec_fc.w"]

    g["enc_fc.b"] = d_latent.sum(axis=0)
    g["enc_fc.w"] = d_latent.T @ cache["h"]
    d_z2 = (d_latent @ p["enc_fc.w"]).reshape(B, -1, c2) * _act_grad(cache["z2"])
    g["enc2.b"] = d_z2.sum(axis=(0, 1))
    g["enc2.w"] = np.einsum("bpo,bpk->ok", d_z2, cache["col2"])
    d_z1 = _col2im(d_z2 @ p["enc2.w"], G2, c1) * _act_grad(cache["z1"])
    g["enc1.b"] = d_z1.sum(axis=(0, 1))
    g["enc1.w"] = np.einsum("bpo,bpk->ok", d_z1, cache["col1"])
    return g


def as_unit_images(images: np.ndarray | Sequence[np.ndarray]) -> np.ndarray:
    """(n, d', d') intensities in 0..255 -> (n, d'*d') reals in [0, 1]."""
    arr = np.asarray(images, dtype=np.float64)
    if arr.ndim == 2:
        arr = arr[None]
    return arr.reshape(arr.shape[0], -1) / 255.0


def mask_count(ratio: float, n_pixels: int) -> int:
    if not 0 <= ratio < 1:
        raise ValueError("mask ratio must lie in [0, 1)")
    return int(np.floor(ratio * n_pixels + 1e-9))


def mask_sample(image: np.ndarray, ratio: float, rng: np.random.Generator) -> tuple[np.ndarray, np.ndarray]:
    image = np.asarray(image)
    count = mask_count(ratio, image.size)
    mask = np.zeros(image.size, dtype=bool)
    mask[rng.permutation(image.size)[:count]] = True
    mask = mask.reshape(image.shape)
    masked = image.copy()
    masked[mask] = 0
    return masked, mask


def sample_masks(n: int, n_pixels: int, ratio: float, rng: np.random.Generator) -> np.ndarray:
    count = mask_count(ratio, n_pixels)
    order = np.argsort(rng.random((n, n_pixels)), axis=1, kind="stable")
    mask = np.zeros((n, n_pixels), dtype=bool)
    np.put_along_axis(mask, order[:, :count], True, axis=1)
    return mask


def masked_mse(reconstruction: np.ndarray, original: np.ndarray, mask: np.ndarray) -> float:
    reconstruction = np.asarray(reconstruction, dtype=np.float64)
    original = np.asarray(original, dtype=np.float64)
    mask = np.asarray(mask, dtype=bool)
    if reconstruction.shape != original.shape or mask.shape != original.shape:
        raise ValueError("reconstruction, original and mask shapes differ")
    if not mask.any():
        raise ValueError("mask selects no entries")
    diff = reconstruction[mask] - original[mask]
    return float(np.mean(diff**2))


def loss_and_grads(model: MaeModel, x: np.ndarray, mask: np.ndarray) -> tuple[float, dict[str, np.ndarray]]:
    """Masked MSE over a batch of unit-range flat images and its parameter gradients."""
    if not mask.any():
        raise ValueError("mask selects no entries")
    masked_input = np.where(mask, 0.0, x)
    _, recon, cache = _forward(model, masked_input)
    diff = np.where(mask, recon - x, 0.0)
    count = mask.sum()
    loss = float(np.sum(diff**2) / count)
    grads = _backward(model, cache, 2.0 * diff / count)
    return loss, grads


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 20
    batch_size: int = 32
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    mask_ratio: float = 0.75
    seed: int = 0

    def __post_init__(self) -> None:
        if self.epochs < 1:
            raise ValueError("epochs must be >= 1")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if not 0 <= self.mask_ratio < 1:
            raise ValueError("mask ratio must lie in [0, 1)")


def train(model: MaeModel, images: np.ndarray | Sequence[np.ndarray], cfg: TrainConfig) -> tuple[MaeModel, list[float]]:
    """Adam on the masked reconstruction loss. Returns a new model and mean loss per epoch."""
    x_all = as_unit_images(images)
    n, n_pix = x_all.shape
    if n < 1:
        raise ValueError("need at least one image")
    if n_pix != model.grid_dim**2:
        raise ValueError(f"images have {n_pix} pixels, model expects {model.grid_dim ** 2}")
    if mask_count(cfg.mask_ratio, n_pix) < 1:
        raise ValueError("mask ratio leaves no pixel to reconstruct")
    model = model.copy()
    rng = np.random.default_rng(cfg.seed)
    m = {k: np.zeros_like(v) for k, v in model.params.items()}
    v = {k: np.zeros_like(v) for k, v in model.params.items()}
    step = 0
    history = []
    for epoch in range(cfg.epochs):
        order = rng.permutation(n)
        masks = sample_masks(n, n_pix, cfg.mask_ratio, rng)
        total = 0.0
        for b, start in enumerate(range(0, n, cfg.batch_size)):
            idx = order[start:start + cfg.batch_size]
            loss, grads = loss_and_grads(model, x_all[idx], masks[idx])
            if not np.isfinite(loss):
                raise TrainingDivergence(f"non-finite loss at epoch {epoch + 1}, batch {b + 1}")
            total += loss * len(idx)
            step += 1
            c1 = 1.0 - cfg.beta1**step
            c2 = 1.0 - cfg.beta2**step
            for name in PARAM_ORDER:
                gr = grads[name]
                m[name] = cfg.beta1 * m[name] + (1.0 - cfg.beta1) * gr
                v[name] = cfg.beta2 * v[name] + (1.0 - cfg.beta2) * gr * gr
                model.params[name] -= cfg.lr * (m[name] / c1) / (np.sqrt(v[name] / c2) + cfg.eps)
        history.append(total / n)
    return model, history


def encode_batch(model: MaeModel, images: np.ndarray | Sequence[np.ndarray]) -> np.ndarray:
    x = as_unit_images(images)
    latent, _, _ = _forward(model, x)
    return latent


def encode(model: MaeModel, image: np.ndarray) -> np.ndarray:
    return encode_batch(model, np.asarray(image)[None])[0]


def reconstruct(model: MaeModel, images: np.ndarray) -> np.ndarray:
    _, recon, _ = _forward(model, as_unit_images(images))
    return recon.reshape(-1, model.grid_dim, model.grid_dim)


def write_loss_history(history: Sequence[float], path: str | Path) -> None:
    with Path(path).open("w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["epoch", "loss"])
        for epoch, loss in enumerate(history, start=1):
            writer.writerow([epoch, repr(float(loss))])
