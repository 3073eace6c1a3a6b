"""Data ingestion: character chunks, token sequences, image patches, and the
integer/lossy YCoCg color transforms.

File containers are deliberately primitive: text is raw bytes, tokens are
little-endian int32, images are raw H x W x 3 byte planes behind a one-line
text header, and shards serialize the same way with their shape and vocab in
the header.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ConfigError, DataError

TEXT_VOCAB = 27  # 'a'-'z' plus whitespace
SPACE_SYMBOL = 26
SIGNED_OFFSET = 255  # shift for Co/Cg channels of the lossless transform
YCOCG_R_VOCAB = 511


@dataclass(frozen=True)
class DatasetShard:
    """Batched integer observations: items x variables, entries in [0, vocab)."""

    data: np.ndarray
    vocab: int
    provenance: str = ""

    def __post_init__(self):
        if self.data.ndim != 2:
            raise DataError(f"shard data must be 2-d, got shape {self.data.shape}")
        if self.data.size and (self.data.min() < 0 or self.data.max() >= self.vocab):
            raise DataError("shard entries outside [0, vocab)")

    @property
    def items(self) -> int:
        return self.data.shape[0]

    @property
    def variables(self) -> int:
        return self.data.shape[1]


# ---------------------------------------------------------------------------
# text and tokens


def load_text_chunks(raw: bytes, chunk_length: int = 256) -> DatasetShard:
    """Map 'a'-'z' to 0..25 and space to 26, split into consecutive
    non-overlapping chunks, drop the trailing remainder."""
    if chunk_length < 1:
        raise ConfigError("chunk length must be >= 1")
    arr = np.frombuffer(raw, dtype=np.uint8)
    lut = np.full(256, -1, dtype=np.int64)
    lut[ord("a"):ord("z") + 1] = np.arange(26)
    lut[ord(" ")] = SPACE_SYMBOL
    mapped = lut[arr]
    bad = mapped < 0
    if bad.any():
        off = int(np.argmax(bad))
        raise DataError(f"illegal byte 0x{arr[off]:02x} at offset {off}; "
                        "expected lowercase letters and spaces only")
    n_chunks = mapped.size // chunk_length
    data = mapped[:n_chunks * chunk_length].reshape(n_chunks, chunk_length)
    return DatasetShard(data=data, vocab=TEXT_VOCAB, provenance="text")


def decode_text(rows: np.ndarray) -> list[str]:
    table = np.array([chr(c) for c in range(ord("a"), ord("z") + 1)] + [" "])
    return ["".join(table[r]) for r in np.atleast_2d(rows)]


def load_token_sequences(tokens: np.ndarray, sequence_length: int = 128,
                         vocab: int = 8192) -> DatasetShard:
    """Pack a flat pre-tokenized integer stream into fixed-length rows."""
    if sequence_length < 1 or vocab < 2:
        raise ConfigError("need sequence length >= 1 and vocab >= 2")
    tokens = np.asarray(tokens).reshape(-1)
    if tokens.size and (tokens.min() < 0 or tokens.max() >= vocab):
        bad = int(np.argmax((tokens < 0) | (tokens >= vocab)))
        raise DataError(f"token {int(tokens[bad])} at position {bad} outside "
                        f"[0, {vocab})")
    rows = tokens.size // sequence_length
    data = tokens[:rows * sequence_length].reshape(rows, sequence_length)
    return DatasetShard(data=data.astype(np.int64), vocab=vocab,
                        provenance="tokens")


def read_token_file(path) -> np.ndarray:
    return np.fromfile(path, dtype="<i4").astype(np.int64)


def write_token_file(path, tokens: np.ndarray) -> None:
    np.asarray(tokens, dtype="<i4").tofile(path)


# ---------------------------------------------------------------------------
# color transforms


def _check_rgb(*channels) -> list[np.ndarray]:
    out = []
    for c in channels:
        a = np.asarray(c)
        if a.size and (a.min() < 0 or a.max() > 255):
            raise DataError("channel values outside [0, 255]")
        out.append(a.astype(np.int64))
    return out


def ycocg_r_forward(r, g, b):
    """Lossless integer transform; floor division keeps it exactly
    invertible.  Y stays in [0, 255]; Co and Cg land in [-255, 255]."""
    r, g, b = _check_rgb(r, g, b)
    co = r - b
    tmp = b + co // 2
    cg = g - tmp
    y = tmp + cg // 2
    return y, co, cg


def ycocg_r_inverse(y, co, cg):
    """Exact inverse; raises if the triple is outside the forward image
    (never clamps silently)."""
    y = np.asarray(y).astype(np.int64)
    co = np.asarray(co).astype(np.int64)
    cg = np.asarray(cg).astype(np.int64)
    tmp = y - cg // 2
    g = cg + tmp
    b = tmp - co // 2
    r = b + co
    for name, c in (("R", r), ("G", g), ("B", b)):
        if c.size and (c.min() < 0 or c.max() > 255):
            raise DataError(
                f"(Y, Co, Cg) outside the forward image: {name} escapes [0, 255]")
    return r, g, b


def ycocg_lossy_forward(r, g, b):
    """Real-arithmetic YCoCg with uniform 256-bin quantization of [-1, 1].

    Values escaping [-1, 1] (the white point does) are clamped into the top
    or bottom bin before quantization."""
    r, g, b = _check_rgb(r, g, b)
    rf, gf, bf = r / 255.0, g / 255.0, b / 255.0
    co = rf - bf
    tmp = bf + co / 2.0
    cg = gf - tmp
    y = tmp * 2.0 + cg + 1.0

    def quant(v):
        idx = np.floor((v + 1.0) / 2.0 * 256.0)
        return np.clip(idx, 0, 255).astype(np.int64)

    return quant(y), quant(co), quant(cg)


# ---------------------------------------------------------------------------
# patches


def extract_patches(images: np.ndarray, patch: int = 8) -> np.ndarray:
    """Non-overlapping aligned patch x patch x 3 patches, flattened
    channel-last row-major; a 32x32 image yields 16 rows of 192 values."""
    images = np.asarray(images)
    if images.ndim == 3:
        images = images[None]
    if images.ndim != 4 or images.shape[3] != 3:
        raise DataError(f"expected (N, H, W, 3) images, got {images.shape}")
    n, h, w, _ = images.shape
    if h % patch or w % patch:
        raise DataError(f"image size {h}x{w} not divisible by patch {patch}")
    tiles = images.reshape(n, h // patch, patch, w // patch, patch, 3)
    tiles = tiles.transpose(0, 1, 3, 2, 4, 5)
    return tiles.reshape(-1, patch * patch * 3)


def reassemble_patches(patches: np.ndarray, height: int, width: int,
                       patch: int = 8) -> np.ndarray:
    """Inverse of extract_patches for a whole number of images."""
    per_image = (height // patch) * (width // patch)
    if patches.shape[0] % per_image:
        raise DataError("patch count is not a whole number of images")
    n = patches.shape[0] // per_image
    tiles = patches.reshape(n, height // patch, width // patch, patch, patch, 3)
    return tiles.transpose(0, 1, 3, 2, 4, 5).reshape(n, height, width, 3)


def images_to_shard(images: np.ndarray, transform: str = "lossless",
                    patch: int = 8) -> DatasetShard:
    """Color-transform images and cut them into patch rows.

    lossless: YCoCg-R with Co/Cg shifted by +255 into [0, 510], vocab 511
    (the shift is recorded via the provenance tag).  lossy: quantized YCoCg,
    vocab 256.  rgb: untouched bytes, vocab 256."""
    images = np.asarray(images)
    if images.ndim == 3:
        images = images[None]
    if images.ndim != 4 or images.shape[3] != 3:
        raise DataError(f"expected (N, H, W, 3) images, got {images.shape}")
    r, g, b = images[..., 0], images[..., 1], images[..., 2]
    if transform == "lossless":
        y, co, cg = ycocg_r_forward(r, g, b)
        stack = np.stack([y, co + SIGNED_OFFSET, cg + SIGNED_OFFSET], axis=-1)
        vocab = YCOCG_R_VOCAB
    elif transform == "lossy":
        y, co, cg = ycocg_lossy_forward(r, g, b)
        stack = np.stack([y, co, cg], axis=-1)
        vocab = 256
    elif transform == "rgb":
        _check_rgb(r, g, b)
        stack = images.astype(np.int64)
        vocab = 256
    else:
        raise ConfigError(f"unknown color transform {transform!r}")
    return DatasetShard(data=extract_patches(stack, patch), vocab=vocab,
                        provenance=f"patches-{transform}")


# ---------------------------------------------------------------------------
# containers


def write_image_container(path, images: np.ndarray) -> None:
    images = np.asarray(images, dtype=np.uint8)
    if images.ndim != 4 or images.shape[3] != 3:
        raise DataError(f"expected (N, H, W, 3) images, got {images.shape}")
    n, h, w, _ = images.shape
    with open(path, "wb") as fh:
        fh.write(f"IMGS {n} {h} {w}\n".encode())
        fh.write(images.tobytes())


def read_image_container(path) -> np.ndarray:
    with open(path, "rb") as fh:
        header = fh.readline().decode()
        parts = header.split()
        if len(parts) != 4 or parts[0] != "IMGS":
            raise DataError(f"bad image container header: {header!r}")
        n, h, w = (int(v) for v in parts[1:])
        raw = fh.read()
    want = n * h * w * 3
    if len(raw) != want:
        raise DataError(f"image container payload {len(raw)} != expected {want}")
    return np.frombuffer(raw, dtype=np.uint8).reshape(n, h, w, 3).copy()


def write_shard(path, shard: DatasetShard) -> None:
    tag = shard.provenance.replace(" ", "_") or "untagged"
    with open(path, "wb") as fh:
        fh.write(f"SHRD {shard.items} {shard.variables} {shard.vocab} {tag}\n"
                 .encode())
        fh.write(np.asarray(shard.data, dtype="<i4").tobytes())


def read_shard(path) -> DatasetShard:
    with open(path, "rb") as fh:
        header = fh.readline().decode()
        parts = header.split()
        if len(parts) != 5 or parts[0] != "SHRD":
            raise DataError(f"bad shard header: {header!r}")
        items, n_vars, vocab = (int(v) for v in parts[1:4])
        raw = fh.read()
    want = items * n_vars * 4
    if len(raw) != want:
        raise DataError(f"shard payload {len(raw)} != expected {want}")
    data = np.frombuffer(raw, dtype="<i4").astype(np.int64).reshape(items, n_vars)
    return DatasetShard(data=data, vocab=vocab, provenance=parts[4])
