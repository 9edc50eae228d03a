"""Bit-exact binary formats and JSON artifacts.

All writers are pure functions of their inputs (sorted tensor order,
canonical JSON) so re-running a pipeline stage reproduces files byte for
byte.  Readers reject malformed input with the file offset of the problem.
"""

import json
import struct
from pathlib import Path

import numpy as np
import torch

from .geometry import RgbdImage

RGBD_MAGIC = b"RGBD"
RGBD_VERSION = 1
CHECKPOINT_MAGIC = b"DDCP"
CHECKPOINT_VERSION = 1


class FormatError(ValueError):
    """Malformed file content; message carries the byte offset."""

    def __init__(self, path, offset: int, message: str):
        super().__init__(f"{path}: offset {offset}: {message}")
        self.offset = offset


def write_rgbd(img: RgbdImage, path) -> None:
    """RGBD file: magic, u32 version, u32 width, u32 height, u8 has_sky,
    row-major interleaved RGBD float32 LE, then optional sky bytes."""
    if not np.isfinite(img.pixels).all():
        raise ValueError("refusing to write non-finite pixels")
    has_sky = img.sky is not None
    header = RGBD_MAGIC + struct.pack("<IIIB", RGBD_VERSION, img.width,
                                      img.height, int(has_sky))
    payload = np.ascontiguousarray(img.pixels, dtype="<f4").tobytes()
    blob = header + payload
    if has_sky:
        blob += np.ascontiguousarray(img.sky, dtype=np.uint8).tobytes()
    Path(path).write_bytes(blob)


def read_rgbd(path) -> RgbdImage:
    data = Path(path).read_bytes()
    if len(data) < 17:
        raise FormatError(path, len(data), "truncated header")
    if data[:4] != RGBD_MAGIC:
        raise FormatError(path, 0, f"bad magic {data[:4]!r}")
    version, width, height, has_sky = struct.unpack("<IIIB", data[4:17])
    if version != RGBD_VERSION:
        raise FormatError(path, 4, f"unsupported version {version}")
    if width == 0 or height == 0:
        raise FormatError(path, 8, "zero image dimension")
    if has_sky not in (0, 1):
        raise FormatError(path, 16, f"has_sky must be 0 or 1, got {has_sky}")
    n_payload = 16 * width * height
    expected = 17 + n_payload + (width * height if has_sky else 0)
    if len(data) != expected:
        raise FormatError(path, min(len(data), expected),
                          f"expected {expected} bytes, found {len(data)}")
    pixels = np.frombuffer(data[17:17 + n_payload], dtype="<f4").reshape(
        height, width, 4)
    if not np.isfinite(pixels).all():
        raise FormatError(path, 17, "non-finite pixel values")
    sky = None
    if has_sky:
        sky_bytes = np.frombuffer(data[17 + n_payload:], dtype=np.uint8)
        if not np.isin(sky_bytes, (0, 1)).all():
            raise FormatError(path, 17 + n_payload, "sky mask bytes must be 0/1")
        sky = sky_bytes.reshape(height, width).astype(bool)
    return RgbdImage(pixels=pixels.copy(), sky=sky)


def _canonical_json(obj) -> bytes:
    return json.dumps(obj, sort_keys=True, separators=(",", ":")).encode()


def write_checkpoint(model, path) -> None:
    """Checkpoint: magic, u32 version, u64 json_len, JSON header, f32 payload.

    The header lists every tensor (name, shape, offset, nbytes) in sorted
    name order plus meta {step, T, resolution, config_hash, arch}; EMA
    tensors are stored under an "ema." prefix.
    """
    tensors = {}
    for name, t in model.parameter_tensors(ema=False).items():
        tensors[name] = t.detach().numpy().astype("<f4")
    for name, t in model.parameter_tensors(ema=True).items():
        tensors["ema." + name] = t.detach().numpy().astype("<f4")

    entries = []
    offset = 0
    chunks = []
    for name in sorted(tensors):
        arr = np.ascontiguousarray(tensors[name])
        entries.append({
            "name": name,
            "shape": list(arr.shape),
            "offset": offset,
            "nbytes": arr.nbytes,
        })
        chunks.append(arr.tobytes())
        offset += arr.nbytes
    header = {
        "tensors": entries,
        "meta": {
            "step": int(model.step),
            "T": int(model.arch["t_steps"]),
            "resolution": int(model.arch["resolution"]),
            "config_hash": model.config_hash,
            "arch": model.arch,
        },
    }
    hjson = _canonical_json(header)
    blob = (CHECKPOINT_MAGIC + struct.pack("<IQ", CHECKPOINT_VERSION, len(hjson))
            + hjson + b"".join(chunks))
    Path(path).write_bytes(blob)


def read_checkpoint_header(path) -> dict:
    data = Path(path).read_bytes()
    if len(data) < 16:
        raise FormatError(path, len(data), "truncated header")
    if data[:4] != CHECKPOINT_MAGIC:
        raise FormatError(path, 0, f"bad magic {data[:4]!r}")
    version, json_len = struct.unpack("<IQ", data[4:16])
    if version != CHECKPOINT_VERSION:
        raise FormatError(path, 4, f"unsupported version {version}")
    if 16 + json_len > len(data):
        raise FormatError(path, 16, "header length exceeds file size")
    try:
        header = json.loads(data[16:16 + json_len])
    except json.JSONDecodeError as e:
        raise FormatError(path, 16, f"invalid header JSON: {e}") from e
    header["_payload_start"] = 16 + json_len
    header["_file_size"] = len(data)
    return header


def read_checkpoint(path):
    """Restore a DenoiserModel (weights, EMA, meta) from a checkpoint."""
    from .diffusion.model import create_model

    header = read_checkpoint_header(path)
    data = Path(path).read_bytes()
    start = header["_payload_start"]
    meta = header["meta"]
    model = create_model(meta["arch"], seed=0, config_hash=meta["config_hash"])
    model.step = int(meta["step"])

    loaded = {}
    for entry in header["tensors"]:
        lo = start + entry["offset"]
        hi = lo + entry["nbytes"]
        if hi > len(data):
            raise FormatError(path, lo,
                              f"tensor {entry['name']} extends past end of file")
        arr = np.frombuffer(data[lo:hi], dtype="<f4").reshape(entry["shape"])
        loaded[entry["name"]] = torch.from_numpy(arr.copy())

    theta = {k: v for k, v in loaded.items() if not k.startswith("ema.")}
    ema = {k[4:]: v for k, v in loaded.items() if k.startswith("ema.")}
    missing = set(model.net.state_dict()) - set(theta)
    if missing:
        raise FormatError(path, start, f"missing tensors: {sorted(missing)[:3]}")
    model.net.load_state_dict(theta)
    model.ema_net.load_state_dict(ema)
    return model


def write_json(obj, path) -> None:
    Path(path).write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n")


def read_json(path):
    return json.loads(Path(path).read_text())


def export_png(img: RgbdImage, rgb_path, disparity_path=None) -> None:
    """8-bit PNG previews: RGB, and disparity as grayscale."""
    from PIL import Image

    rgb = (np.clip(img.rgb, 0.0, 1.0) * 255).round().astype(np.uint8)
    Image.fromarray(rgb, mode="RGB").save(rgb_path)
    if disparity_path is not None:
        d = (np.clip(img.disparity, 0.0, 1.0) * 255).round().astype(np.uint8)
        Image.fromarray(d, mode="L").save(disparity_path)
