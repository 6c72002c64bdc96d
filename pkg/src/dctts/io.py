"""Binary file formats: checkpoints, tensor files, token grids and PCM WAV."""

import struct
import wave
from pathlib import Path
from typing import Dict, Tuple

import numpy as np
import torch

from .errors import CheckpointError, InputError

CKPT_MAGIC = b"DCKP"
CKPT_VERSION = 1
TENSOR_MAGIC = b"DCT1"
TOKEN_MAGIC = b"DCTK"


def save_checkpoint(path, tensors: Dict[str, torch.Tensor]) -> None:
    """Write named float64 tensors; record order follows dict order."""
    parts = [CKPT_MAGIC, struct.pack("<HI", CKPT_VERSION, len(tensors))]
    for name, t in tensors.items():
        raw = name.encode("utf-8")
        # ascontiguousarray would promote 0-d to 1-d
        arr = np.asarray(t.detach().cpu().numpy(), dtype="<f8", order="C")
        parts.append(struct.pack("<H", len(raw)))
        parts.append(raw)
        parts.append(struct.pack("<B", arr.ndim))
        parts.append(struct.pack(f"<{arr.ndim}I", *arr.shape))
        parts.append(arr.tobytes())
    Path(path).write_bytes(b"".join(parts))


def load_checkpoint(path) -> Dict[str, torch.Tensor]:
    path = Path(path)
    if not path.exists():
        raise CheckpointError(f"checkpoint not found: {path}")
    buf = path.read_bytes()
    if buf[:4] != CKPT_MAGIC:
        raise CheckpointError(f"{path}: bad magic {buf[:4]!r}")
    version, count = struct.unpack_from("<HI", buf, 4)
    if version != CKPT_VERSION:
        raise CheckpointError(f"{path}: unsupported version {version}")
    off = 10
    out = {}
    try:
        for _ in range(count):
            (nlen,) = struct.unpack_from("<H", buf, off)
            off += 2
            name = buf[off:off + nlen].decode("utf-8")
            off += nlen
            (rank,) = struct.unpack_from("<B", buf, off)
            off += 1
            dims = struct.unpack_from(f"<{rank}I", buf, off)
            off += 4 * rank
            n = int(np.prod(dims)) if rank else 1
            arr = np.frombuffer(buf, dtype="<f8", count=n, offset=off).reshape(dims)
            off += 8 * n
            out[name] = torch.from_numpy(arr.copy())
    except (struct.error, ValueError) as exc:
        raise CheckpointError(f"{path}: truncated checkpoint ({exc})") from exc
    return out


def save_tensor(path, array) -> None:
    arr = np.asarray(array, dtype="<f4", order="C")
    header = TENSOR_MAGIC + struct.pack("<B", arr.ndim) + struct.pack(f"<{arr.ndim}I", *arr.shape)
    Path(path).write_bytes(header + arr.tobytes())


def load_tensor(path) -> np.ndarray:
    buf = Path(path).read_bytes()
    if buf[:4] != TENSOR_MAGIC:
        raise InputError(f"{path}: not a tensor file")
    (rank,) = struct.unpack_from("<B", buf, 4)
    dims = struct.unpack_from(f"<{rank}I", buf, 5)
    off = 5 + 4 * rank
    return np.frombuffer(buf, dtype="<f4", offset=off, count=int(np.prod(dims))).reshape(dims).copy()


def save_tokens(path, tokens, f: int, l: int, K: int) -> None:
    """Flattened (time-major) token grid with (f, l, K) header."""
    arr = np.ascontiguousarray(np.asarray(tokens).reshape(-1), dtype="<u4")
    if arr.size != f * l:
        raise InputError(f"token count {arr.size} != f*l = {f * l}")
    Path(path).write_bytes(TOKEN_MAGIC + struct.pack("<III", f, l, K) + arr.tobytes())


def load_tokens(path) -> Tuple[np.ndarray, int, int, int]:
    buf = Path(path).read_bytes()
    if buf[:4] != TOKEN_MAGIC:
        raise InputError(f"{path}: not a token file")
    f, l, K = struct.unpack_from("<III", buf, 4)
    tokens = np.frombuffer(buf, dtype="<u4", offset=16, count=f * l).astype(np.int64)
    return tokens, f, l, K


def write_wav(path, samples, sample_rate: int) -> None:
    x = np.clip(np.asarray(samples, dtype=np.float64), -1.0, 1.0)
    pcm = np.round(x * 32767.0).astype("<i2")
    with wave.open(str(path), "wb") as w:
        w.setnchannels(1)
        w.setsampwidth(2)
        w.setframerate(int(sample_rate))
        w.writeframes(pcm.tobytes())


def read_wav(path) -> Tuple[np.ndarray, int]:
    with wave.open(str(path), "rb") as w:
        if w.getnchannels() != 1 or w.getsampwidth() != 2:
            raise InputError(f"{path}: expected 16-bit mono PCM")
        sr = w.getframerate()
        pcm = np.frombuffer(w.readframes(w.getnframes()), dtype="<i2")
    return pcm.astype(np.float64) / 32767.0, sr
