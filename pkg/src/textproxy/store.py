"""Embedding storage: a bit-exact tensor container plus dataset utilities.

Tensor container layout (all fields little-endian):

    bytes 0..3    magic          b"TVPX"
    bytes 4..7    version        uint32, must be 1
    byte  8       dtype          uint8, 1 = float64 little-endian
    bytes 9..12   ndims          uint32
    then          dims           ndims x uint64
    then          payload        prod(dims) float64 values, row-major

A dataset directory holds ``text_queries.tvpx`` (N x d), ``video_proxies.tvpx``
(N x M x d) and ``manifest.json`` with the ground-truth pairing.  Embeddings
are stored L2-normalized; loaders normalize on ingestion so externally
produced feature dumps behave identically.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import (
    BadMagic,
    BatchTooSmall,
    EmptyInput,
    InvalidConfig,
    NonFiniteData,
    TruncatedPayload,
    UnsupportedVersion,
)

MAGIC = b"TVPX"
VERSION = 1
DTYPE_F64 = 1

TEXT_FILE = "text_queries.tvpx"
VIDEO_FILE = "video_proxies.tvpx"
MANIFEST_FILE = "manifest.json"


def write_tensor(path, tensor) -> None:
    """Serialize a finite float64 tensor; read_tensor inverts it bit-exactly."""
    t = np.asarray(tensor, dtype=np.float64)
    if t.ndim == 0 or 0 in t.shape:
        raise EmptyInput(f"cannot write zero-sized tensor of shape {t.shape}")
    if not np.isfinite(t).all():
        raise NonFiniteData("tensor contains NaN or Inf")
    header = MAGIC
    header += struct.pack("<I", VERSION)
    header += struct.pack("<B", DTYPE_F64)
    header += struct.pack("<I", t.ndim)
    header += struct.pack(f"<{t.ndim}Q", *t.shape)
    payload = np.ascontiguousarray(t, dtype="<f8").tobytes()
    Path(path).write_bytes(header + payload)


def read_tensor(path) -> np.ndarray:
    """Exact inverse of write_tensor."""
    raw = Path(path).read_bytes()
    if raw[:4] != MAGIC:
        raise BadMagic(f"{path}: expected magic {MAGIC!r}, got {raw[:4]!r}")
    if len(raw) < 13:
        raise TruncatedPayload(f"{path}: header truncated at {len(raw)} bytes")
    (version,) = struct.unpack_from("<I", raw, 4)
    if version != VERSION:
        raise UnsupportedVersion(f"{path}: unsupported version {version}")
    (dtype,) = struct.unpack_from("<B", raw, 8)
    if dtype != DTYPE_F64:
        raise UnsupportedVersion(f"{path}: unsupported dtype code {dtype}")
    (ndims,) = struct.unpack_from("<I", raw, 9)
    dims_end = 13 + 8 * ndims
    if len(raw) < dims_end:
        raise TruncatedPayload(f"{path}: dims truncated at {len(raw)} bytes")
    dims = struct.unpack_from(f"<{ndims}Q", raw, 13)
    expected = 8 * int(np.prod(dims, dtype=np.int64))
    payload = raw[dims_end:]
    if len(payload) != expected:
        raise TruncatedPayload(
            f"{path}: payload is {len(payload)} bytes, header promises {expected}"
        )
    flat = np.frombuffer(payload, dtype="<f8")
    return flat.astype(np.float64).reshape(dims)


@dataclass(frozen=True)
class SynthConfig:
    """Knobs for the planted synthetic dataset.

    ``sigma_corrupt`` adds extra noise to the first video proxy only -- the
    one used as the retrieval feature -- so the remaining proxies carry a
    cleaner view of the shared latent than the feature scored against.
    """

    n_pairs: int
    dim: int
    num_video_proxies: int
    sigma_text: float
    sigma_video: float
    sigma_corrupt: float
    seed: int

    def validate(self) -> None:
        if self.n_pairs < 2:
            raise InvalidConfig("n_pairs must be >= 2")
        if self.dim < 2:
            raise InvalidConfig("dim must be >= 2")
        if self.num_video_proxies < 1:
            raise InvalidConfig("num_video_proxies must be >= 1")
        for name in ("sigma_text", "sigma_video", "sigma_corrupt"):
            if getattr(self, name) < 0:
                raise InvalidConfig(f"{name} must be >= 0")


@dataclass(frozen=True)
class EmbeddingDataset:
    """Paired text-query vectors and per-video proxy stacks.

    ``text_queries`` is N x d, ``video_proxies`` is N x M x d with the first
    proxy per video doubling as its retrieval feature.  ``pairs`` lists the
    (text_id, video_id) ground truth.
    """

    text_queries: np.ndarray
    video_proxies: np.ndarray
    pairs: tuple[tuple[int, int], ...]

    def __post_init__(self):
        tq = self.text_queries
        vp = self.video_proxies
        if tq.ndim != 2 or vp.ndim != 3 or tq.shape[1] != vp.shape[2]:
            raise InvalidConfig(
                f"inconsistent tensor shapes {tq.shape} / {vp.shape}"
            )
        if len(self.pairs) != tq.shape[0]:
            raise InvalidConfig("manifest length must equal the number of texts")
        for t, v in self.pairs:
            if not (0 <= t < tq.shape[0] and 0 <= v < vp.shape[0]):
                raise InvalidConfig(f"pair ({t}, {v}) references an unknown id")
        if (np.linalg.norm(tq, axis=1) < 1e-30).any():
            raise InvalidConfig("a text query has zero norm")
        if (np.linalg.norm(vp, axis=2) < 1e-30).any():
            raise InvalidConfig("a video proxy has zero norm")

    @property
    def n_pairs(self) -> int:
        return self.text_queries.shape[0]

    @property
    def dim(self) -> int:
        return self.text_queries.shape[1]

    @property
    def num_video_proxies(self) -> int:
        return self.video_proxies.shape[1]

    def ground_truth(self) -> np.ndarray:
        """Video index per text index, from the pairing manifest."""
        gt = np.full(self.n_pairs, -1, dtype=np.int64)
        for t, v in self.pairs:
            gt[t] = v
        return gt


def _normalize_rows(x: np.ndarray) -> np.ndarray:
    return x / np.linalg.norm(x, axis=-1, keepdims=True)


def generate_synthetic(cfg: SynthConfig) -> EmbeddingDataset:
    """Plant a shared latent per pair, then corrupt the retrieval proxy.

    For each pair a latent z is drawn from a standard normal.  The text
    query and every video proxy are noisy copies of z; the first proxy
    additionally receives ``sigma_corrupt`` noise.  Deterministic per seed.
    """
    cfg.validate()
    rng = np.random.default_rng(cfg.seed)
    n, d, m = cfg.n_pairs, cfg.dim, cfg.num_video_proxies
    z = rng.standard_normal((n, d))
    eps_text = rng.standard_normal((n, d))
    eps_video = rng.standard_normal((n, m, d))
    eps_corrupt = rng.standard_normal((n, d))

    text = _normalize_rows(z + cfg.sigma_text * eps_text)
    proxies = z[:, None, :] + cfg.sigma_video * eps_video
    proxies[:, 0, :] += cfg.sigma_corrupt * eps_corrupt
    proxies = _normalize_rows(proxies)

    pairs = tuple((i, i) for i in range(n))
    return EmbeddingDataset(text, proxies, pairs)


def make_batches(
    dataset: EmbeddingDataset, batch_size: int, seed: int
) -> list[np.ndarray]:
    """Seeded permutation of all indices, chunked; a short tail is dropped."""
    if batch_size < 2:
        raise BatchTooSmall("contrastive batches need at least 2 elements")
    n = dataset.n_pairs
    if batch_size > n:
        raise InvalidConfig(f"batch size {batch_size} exceeds dataset size {n}")
    perm = np.random.default_rng(seed).permutation(n)
    n_full = n // batch_size
    return [perm[i * batch_size : (i + 1) * batch_size] for i in range(n_full)]


def save_dataset(dataset: EmbeddingDataset, out_dir) -> None:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    write_tensor(out / TEXT_FILE, dataset.text_queries)
    write_tensor(out / VIDEO_FILE, dataset.video_proxies)
    manifest = {
        "dim": dataset.dim,
        "num_video_proxies": dataset.num_video_proxies,
        "files": {"text_queries": TEXT_FILE, "video_proxies": VIDEO_FILE},
        "pairs": [{"text_id": t, "video_id": v} for t, v in dataset.pairs],
    }
    (out / MANIFEST_FILE).write_text(
        json.dumps(manifest, indent=2, sort_keys=True) + "\n", encoding="utf-8"
    )


def load_dataset(data_dir) -> EmbeddingDataset:
    """Load a dataset directory, normalizing embeddings on ingestion."""
    root = Path(data_dir)
    manifest = json.loads((root / MANIFEST_FILE).read_text(encoding="utf-8"))
    files = manifest.get("files", {})
    text = read_tensor(root / files.get("text_queries", TEXT_FILE))
    proxies = read_tensor(root / files.get("video_proxies", VIDEO_FILE))
    text = _normalize_rows(text)
    proxies = _normalize_rows(proxies)
    pairs = tuple((p["text_id"], p["video_id"]) for p in manifest["pairs"])
    ds = EmbeddingDataset(text, proxies, pairs)
    if ds.dim != manifest["dim"] or ds.num_video_proxies != manifest["num_video_proxies"]:
        raise InvalidConfig("manifest dimensions disagree with tensor files")
    return ds
