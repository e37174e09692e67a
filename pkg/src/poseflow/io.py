"""File formats: checkpoint archive, flow pyramid records, PNG rasters, pair lists.

Checkpoint archive (little-endian)::

    magic   8 bytes  b"PFCK01\\0\\0"
    u32     format version (1)
    u32     number of tensor records
    record  u16 name length, name (utf-8), u8 dtype code, u8 ndim,
            u32 x ndim dims, u64 byte offset into the data block, u64 byte count
    u64     data block length, then the data block (raw tensors)
    u64     metadata length, then metadata as sorted compact JSON

Flow pyramid file: magic b"PFLOW01\\0", then for each of the 6 levels a u32
height, u32 width and height*width*2 float32 values (dx, dy interleaved).
"""
from __future__ import annotations

import json
import os
import struct
import tempfile
from dataclasses import dataclass
from pathlib import Path
from typing import Optional

import numpy as np
import png
import torch
from PIL import Image as PILImage

from .types import NUM_GARMENTS, NUM_LEVELS, NUM_PARTS, FlowPyramid, GarmentParsing, Image, PoseMap, SamplePair, make_residues

CKPT_MAGIC = b"PFCK01\x00\x00"
CKPT_VERSION = 1
FLOW_MAGIC = b"PFLOW01\x00"

_DTYPES = {0: np.dtype("<f4"), 1: np.dtype("<f8"), 2: np.dtype("<i8"), 3: np.dtype("<i4"), 4: np.dtype("u1")}
_CODES = {v: k for k, v in _DTYPES.items()}


class CheckpointError(ValueError):
    pass


class CorruptArchiveError(CheckpointError):
    pass


class VersionMismatchError(CheckpointError):
    pass


class ShapeMismatchError(CheckpointError):
    pass


def _atomic_write(path, data: bytes):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=path.name + ".", suffix=".tmp")
    try:
        with os.fdopen(fd, "wb") as f:
            f.write(data)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def _as_array(t) -> np.ndarray:
    if isinstance(t, torch.Tensor):
        t = t.detach().cpu()
        if t.dtype == torch.bool:
            t = t.to(torch.uint8)
        t = t.numpy()
    a = np.asarray(t)
    if a.dtype == np.bool_:
        a = a.astype(np.uint8)
    target = a.dtype.newbyteorder("<") if a.dtype.itemsize > 1 else a.dtype
    if target not in _CODES:
        raise CheckpointError(f"unsupported dtype {a.dtype}")
    return a.astype(target, order="C", copy=False)


def encode_checkpoint(tensors: dict, metadata: dict = None) -> bytes:
    arrays = [(name, _as_array(t)) for name, t in tensors.items()]
    header = [CKPT_MAGIC, struct.pack("<II", CKPT_VERSION, len(arrays))]
    data, offset = [], 0
    for name, a in arrays:
        nb = name.encode("utf-8")
        header.append(struct.pack("<H", len(nb)) + nb)
        header.append(struct.pack("<BB", _CODES[a.dtype], a.ndim) + struct.pack(f"<{a.ndim}I", *a.shape))
        header.append(struct.pack("<QQ", offset, a.nbytes))
        data.append(a.tobytes())
        offset += a.nbytes
    meta = json.dumps(metadata or {}, sort_keys=True, separators=(",", ":")).encode("utf-8")
    return b"".join(header) + struct.pack("<Q", offset) + b"".join(data) + struct.pack("<Q", len(meta)) + meta


def decode_checkpoint(buf: bytes):
    """Return ``(tensors, metadata)``; tensors maps name -> numpy array in record order."""
    if len(buf) < 8 or buf[:8] != CKPT_MAGIC:
        raise CorruptArchiveError("bad magic: not a checkpoint archive")
    pos = 8

    def take(fmt):
        nonlocal pos
        size = struct.calcsize(fmt)
        if pos + size > len(buf):
            raise CorruptArchiveError("truncated archive")
        vals = struct.unpack_from(fmt, buf, pos)
        pos += size
        return vals

    version, n = take("<II")
    if version != CKPT_VERSION:
        raise VersionMismatchError(f"archive version {version}, expected {CKPT_VERSION}")
    records = []
    for _ in range(n):
        (ln,) = take("<H")
        if pos + ln > len(buf):
            raise CorruptArchiveError("truncated archive")
        name = buf[pos : pos + ln].decode("utf-8")
        pos += ln
        code, ndim = take("<BB")
        if code not in _DTYPES:
            raise CorruptArchiveError(f"unknown dtype code {code}")
        shape = take(f"<{ndim}I") if ndim else ()
        offset, nbytes = take("<QQ")
        records.append((name, _DTYPES[code], shape, offset, nbytes))
    (data_len,) = take("<Q")
    data_start = pos
    if data_start + data_len > len(buf):
        raise CorruptArchiveError("truncated archive")
    pos += data_len
    (meta_len,) = take("<Q")
    if pos + meta_len != len(buf):
        raise CorruptArchiveError("truncated archive" if pos + meta_len > len(buf) else "trailing bytes after metadata")
    try:
        metadata = json.loads(buf[pos : pos + meta_len].decode("utf-8"))
    except ValueError as e:
        raise CorruptArchiveError("metadata is not valid JSON") from e
    tensors = {}
    for name, dt, shape, offset, nbytes in records:
        if offset + nbytes > data_len or int(np.prod(shape, dtype=np.int64)) * dt.itemsize != nbytes:
            raise CorruptArchiveError(f"record {name!r} inconsistent with data block")
        a = np.frombuffer(buf, dtype=dt, count=nbytes // dt.itemsize, offset=data_start + offset).reshape(shape)
        tensors[name] = a.copy()
    return tensors, metadata


def save_checkpoint(path, tensors, metadata: dict = None):
    """Write a state dict (or module) atomically."""
    if isinstance(tensors, torch.nn.Module):
        tensors = tensors.state_dict()
    _atomic_write(path, encode_checkpoint(tensors, metadata))


def load_checkpoint(path):
    return decode_checkpoint(Path(path).read_bytes())


def load_into(module: torch.nn.Module, path) -> dict:
    """Load an archive into ``module`` with strict name and shape checks; returns metadata."""
    tensors, metadata = load_checkpoint(path)
    state = module.state_dict()
    missing = set(state) - set(tensors)
    extra = set(tensors) - set(state)
    if missing or extra:
        raise ShapeMismatchError(f"parameter names differ: missing {sorted(missing)}, unexpected {sorted(extra)}")
    for name, a in tensors.items():
        if tuple(a.shape) != tuple(state[name].shape):
            raise ShapeMismatchError(f"{name}: archive shape {a.shape}, model shape {tuple(state[name].shape)}")
    module.load_state_dict({k: torch.from_numpy(v).to(state[k].dtype) for k, v in tensors.items()})
    return metadata


# ----------------------------------------------------------------------------
# flow pyramid


def encode_pyramid(p: FlowPyramid) -> bytes:
    parts = [FLOW_MAGIC]
    for lv in p.levels:
        h, w = lv.shape[:2]
        parts.append(struct.pack("<II", h, w))
        parts.append(np.ascontiguousarray(lv, dtype="<f4").tobytes())
    return b"".join(parts)


def decode_pyramid(buf: bytes) -> FlowPyramid:
    if buf[:8] != FLOW_MAGIC:
        raise CorruptArchiveError("bad magic: not a flow pyramid file")
    pos, levels = 8, []
    for _ in range(NUM_LEVELS):
        if pos + 8 > len(buf):
            raise CorruptArchiveError("truncated flow pyramid")
        h, w = struct.unpack_from("<II", buf, pos)
        pos += 8
        nbytes = h * w * 2 * 4
        if pos + nbytes > len(buf):
            raise CorruptArchiveError("truncated flow pyramid")
        levels.append(np.frombuffer(buf, dtype="<f4", count=h * w * 2, offset=pos).reshape(h, w, 2).copy())
        pos += nbytes
    if pos != len(buf):
        raise CorruptArchiveError("trailing bytes after flow pyramid")
    return FlowPyramid(tuple(levels))


def save_pyramid(path, p: FlowPyramid):
    _atomic_write(path, encode_pyramid(p))


def load_pyramid(path) -> FlowPyramid:
    return decode_pyramid(Path(path).read_bytes())


# ----------------------------------------------------------------------------
# PNG rasters


def image_to_uint8(data: np.ndarray) -> np.ndarray:
    return np.round((np.clip(data, -1, 1) + 1) * 127.5).astype(np.uint8)


def save_png(path, data: np.ndarray):
    """Save an H x W x 3 [-1, 1] raster (or H x W [0, 1] grayscale) as 8-bit PNG."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    data = np.asarray(data)
    if data.ndim == 2:
        PILImage.fromarray(np.round(np.clip(data, 0, 1) * 255).astype(np.uint8), "L").save(path)
    else:
        PILImage.fromarray(image_to_uint8(data), "RGB").save(path)


def save_image(path, img: Image):
    save_png(path, img.data)


def load_image(path) -> Image:
    a = np.asarray(PILImage.open(path).convert("RGB"), dtype=np.float32)
    return Image(a / 127.5 - 1)


def save_index_png(path, index: np.ndarray):
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    PILImage.fromarray(np.asarray(index, dtype=np.uint8), "L").save(path)


def load_index_png(path) -> np.ndarray:
    return np.asarray(PILImage.open(path), dtype=np.int64)


def save_uv_png(path, uv: np.ndarray):
    """2-channel 16-bit PNG (grey + alpha) of UV quantized to 0..65535."""
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    h, w = uv.shape[:2]
    q = np.round(np.clip(uv, 0, 1) * 65535).astype(np.uint16).reshape(h, w * 2)
    with open(path, "wb") as f:
        png.Writer(w, h, greyscale=True, alpha=True, bitdepth=16).write(f, q.tolist())


def load_uv_png(path) -> np.ndarray:
    w, h, rows, info = png.Reader(filename=str(path)).read()
    if info["planes"] != 2 or info["bitdepth"] != 16:
        raise ValueError(f"{path}: expected a 2-channel 16-bit PNG")
    a = np.vstack([np.asarray(r, dtype=np.uint16) for r in rows]).reshape(h, w, 2)
    return a.astype(np.float32) / 65535


# sample file naming: <stem>.png, <stem>_pose.png, <stem>_uv.png, <stem>_parse.png


def _companions(path):
    p = Path(path)
    stem = p.with_suffix("")
    return p, Path(f"{stem}_pose.png"), Path(f"{stem}_uv.png"), Path(f"{stem}_parse.png")


def save_sample(path, img: Image, pose: PoseMap, garment: GarmentParsing):
    ip, pp, up, gp = _companions(path)
    save_image(ip, img)
    save_index_png(pp, pose.parts.argmax(-1))
    save_uv_png(up, pose.uv)
    save_index_png(gp, garment.indices())


def load_sample(path, num_parts: int = NUM_PARTS, num_garments: int = NUM_GARMENTS):
    ip, pp, up, gp = _companions(path)
    img = load_image(ip)
    pose = PoseMap.from_indices(load_index_png(pp), load_uv_png(up), num_parts)
    garment = GarmentParsing.from_indices(load_index_png(gp), num_garments)
    return img, pose, garment


@dataclass
class PairRecord:
    pair_id: str
    pair: SamplePair
    flow: Optional[FlowPyramid] = None
    target_path: Optional[Path] = None


def read_pair_list(path) -> list:
    """Parse ``source<TAB>target`` lines; relative paths resolve against the list's directory."""
    path = Path(path)
    out = []
    for i, line in enumerate(path.read_text().splitlines()):
        if not line.strip() or line.startswith("#"):
            continue
        cols = line.split("\t")
        if len(cols) != 2:
            raise ValueError(f"{path}:{i + 1}: expected 'source<TAB>target'")
        out.append(tuple(p if Path(p).is_absolute() else path.parent / p for p in cols))
    return [(Path(a), Path(b)) for a, b in out]


def load_pair_list(path, num_parts: int = NUM_PARTS, num_garments: int = NUM_GARMENTS, residue_fill: str = "diffusion") -> list:
    """Load every pair in a pair list; ground-truth flows are picked up from ``flows/<pair_id>.pflow``."""
    path = Path(path)
    records = []
    for i, (src, tgt) in enumerate(read_pair_list(path)):
        pair_id = f"{i:04d}"
        si, sp, sg = load_sample(src, num_parts, num_garments)
        ti, tp, tg = load_sample(tgt, num_parts, num_garments)
        pair = SamplePair(si, sp, sg, ti, tp, tg, make_residues(ti, tg, fill=residue_fill))
        flow_path = path.parent / "flows" / f"{pair_id}.pflow"
        flow = load_pyramid(flow_path) if flow_path.exists() else None
        records.append(PairRecord(pair_id, pair, flow, tgt))
    return records


def write_toy_dataset(out_dir, n: int, seed: int, size: int = 64, num_parts: int = NUM_PARTS, num_garments: int = NUM_GARMENTS):
    from .toydata import generate_toy_sample

    out = Path(out_dir)
    lines = []
    for i in range(n):
        s = generate_toy_sample(seed * 100003 + i, size, num_parts=num_parts, num_garments=num_garments)
        p = s.pair
        src, tgt = f"images/{i:04d}_src.png", f"images/{i:04d}_tgt.png"
        save_sample(out / src, p.source_image, p.source_pose, p.source_garment)
        save_sample(out / tgt, p.target_image, p.target_pose, p.target_garment)
        save_pyramid(out / "flows" / f"{i:04d}.pflow", s.flow)
        lines.append(f"{src}\t{tgt}")
    (out / "pairs.txt").write_text("\n".join(lines) + "\n")
    meta = {"n": n, "seed": seed, "size": size, "num_parts": num_parts, "num_garments": num_garments}
    (out / "toydata.json").write_text(json.dumps(meta, sort_keys=True, indent=1) + "\n")
    return out
