"""Subprocess backends for the denoiser and regressor interfaces.

Wire protocol (all integers little-endian, images row-major float32):

* Every frame is ``u32 length`` followed by ``length`` payload bytes.
* Handshake: each side sends one frame whose payload is ``u16 version``
  (currently 1); the client sends first.
* Request payload: ``u8 kind, u32 l, u32 width, u32 height, f32[w*h]``
  with kind 1 = noise prediction, kind 2 = regression.
* Response payload: kind 1 -> ``f32[w*h]`` (the predicted noise);
  kind 2 -> ``f64 value`` then ``f32[w*h]`` (the gradient).
"""

from __future__ import annotations

import shlex
import struct
import subprocess

import numpy as np

from .errors import PluginError

PROTOCOL_VERSION = 1
KIND_EPSILON = 1
KIND_REGRESS = 2


def _pack_frame(payload: bytes) -> bytes:
    return struct.pack("<I", len(payload)) + payload


def _read_exact(stream, n: int, context: str) -> bytes:
    chunks = []
    remaining = n
    while remaining > 0:
        chunk = stream.read(remaining)
        if not chunk:
            raise PluginError(f"plugin closed the stream while {context}")
        chunks.append(chunk)
        remaining -= len(chunk)
    return b"".join(chunks)


def read_frame(stream, context: str = "reading a frame") -> bytes:
    header = _read_exact(stream, 4, context)
    (length,) = struct.unpack("<I", header)
    if length > (1 << 30):
        raise PluginError(f"implausible frame length {length} while {context}")
    return _read_exact(stream, length, context)


def write_frame(stream, payload: bytes) -> None:
    stream.write(_pack_frame(payload))
    stream.flush()


def encode_request(kind: int, l: int, image: np.ndarray) -> bytes:
    h, w = image.shape
    head = struct.pack("<BIII", kind, l, w, h)
    return head + np.ascontiguousarray(image, dtype="<f4").tobytes()


def decode_request(payload: bytes):
    kind, l, w, h = struct.unpack("<BIII", payload[:13])
    data = np.frombuffer(payload[13:], dtype="<f4")
    if data.size != w * h:
        raise PluginError(f"request payload holds {data.size} pixels, expected {w * h}")
    return kind, l, data.reshape(h, w).astype(np.float64)


class PluginProcess:
    """One worker subprocess speaking the framed protocol."""

    def __init__(self, command: str):
        self.command = command
        try:
            self.proc = subprocess.Popen(
                shlex.split(command), stdin=subprocess.PIPE,
                stdout=subprocess.PIPE)
        except OSError as exc:
            raise PluginError(f"cannot start plugin {command!r}: {exc}") from exc
        try:
            write_frame(self.proc.stdin, struct.pack("<H", PROTOCOL_VERSION))
            reply = read_frame(self.proc.stdout, "handshaking")
            (version,) = struct.unpack("<H", reply[:2])
            if version != PROTOCOL_VERSION:
                raise PluginError(f"plugin speaks protocol {version}, "
                                  f"expected {PROTOCOL_VERSION}")
        except (PluginError, struct.error, BrokenPipeError) as exc:
            self.close()
            if isinstance(exc, PluginError):
                raise
            raise PluginError(f"handshake with {command!r} failed: {exc}") from exc

    def _roundtrip(self, kind: int, l: int, image: np.ndarray) -> bytes:
        try:
            write_frame(self.proc.stdin, encode_request(kind, l, image))
            return read_frame(self.proc.stdout, f"waiting for a kind-{kind} reply")
        except (BrokenPipeError, OSError) as exc:
            raise PluginError(f"plugin {self.command!r} pipe failure: {exc}",
                              step=l) from exc

    def epsilon(self, image: np.ndarray, l: int) -> np.ndarray:
        reply = self._roundtrip(KIND_EPSILON, l, image)
        expected = image.size * 4
        if len(reply) != expected:
            raise PluginError(f"noise reply holds {len(reply)} bytes, "
                              f"expected {expected}", step=l)
        return np.frombuffer(reply, dtype="<f4").reshape(image.shape).astype(np.float64)

    def regress(self, image: np.ndarray, l: int):
        reply = self._roundtrip(KIND_REGRESS, l, image)
        expected = 8 + image.size * 4
        if len(reply) != expected:
            raise PluginError(f"regression reply holds {len(reply)} bytes, "
                              f"expected {expected}", step=l)
        (value,) = struct.unpack("<d", reply[:8])
        grad = np.frombuffer(reply[8:], dtype="<f4").reshape(image.shape)
        return float(value), grad.astype(np.float64)

    def close(self) -> None:
        proc = getattr(self, "proc", None)
        if proc is None:
            return
        try:
            if proc.stdin:
                proc.stdin.close()
            proc.terminate()
            proc.wait(timeout=5)
        except Exception:
            proc.kill()

    def __enter__(self):
        return self

    def __exit__(self, *exc_info):
        self.close()


class PluginDenoiser:
    """Denoiser backend delegating noise prediction to a subprocess.

    Batched inputs are sent one image at a time; instances are not
    shareable across threads (spawn one per worker).
    """

    def __init__(self, command: str):
        self.process = PluginProcess(command)

    def epsilon(self, x_l: np.ndarray, l: int, sched) -> np.ndarray:
        x_l = np.asarray(x_l, dtype=float)
        if x_l.ndim == 2:
            return self.process.epsilon(x_l, l)
        flat = x_l.reshape(-1, *x_l.shape[-2:])
        return np.stack([self.process.epsilon(img, l) for img in flat]) \
            .reshape(x_l.shape)

    def close(self):
        self.process.close()


class PluginRegressor:
    """Regressor backend delegating prediction to a subprocess."""

    def __init__(self, command: str):
        self.process = PluginProcess(command)

    def predict(self, x_l: np.ndarray, l: int, sched):
        x_l = np.asarray(x_l, dtype=float)
        if x_l.ndim == 2:
            return self.process.regress(x_l, l)
        flat = x_l.reshape(-1, *x_l.shape[-2:])
        pairs = [self.process.regress(img, l) for img in flat]
        values = np.array([v for v, _ in pairs]).reshape(x_l.shape[:-2])
        grads = np.stack([g for _, g in pairs]).reshape(x_l.shape)
        return values, grads

    def close(self):
        self.process.close()
