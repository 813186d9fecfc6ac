"""Checkpoint container: a text header followed by little-endian arrays.

Layout::

    EMSTDP-CHECKPOINT <version>
    key value            (one per line: structure, feedback, T, theta, seed, ...)
    array <name> <dtype> <d0>x<d1>...
    ...
    end
    <raw array bytes, in the order the array lines appear>

The integer payload stores forward weights as int8 (conv layers as their
k x k x c_in x c_out kernels), then the fixed feedback matrices. The real
payload variant stores float32 values plus a per-layer ``scale`` used to
quantize on load. No timestamps or host data are written, so identical
networks give identical bytes.
"""
from __future__ import annotations

import io
from dataclasses import fields
from pathlib import Path

import numpy as np

from .network import BuildParams, BuiltNetwork, build_network
from .structure import parse_structure

MAGIC = "EMSTDP-CHECKPOINT"
VERSION = 1
_DTYPES = {"int8": "<i1", "float32": "<f4"}


class CheckpointError(ValueError):
    pass


def _fmt(v) -> str:
    if v is None:
        return "none"
    if isinstance(v, (tuple, list)):
        return ",".join(map(str, v)) if v else "none"
    return str(v)


def _write(path, header: list[tuple[str, str]], arrays: list[tuple[str, np.ndarray, str]]):
    buf = io.StringIO()
    buf.write(f"{MAGIC} {VERSION}\n")
    for k, v in header:
        buf.write(f"{k} {v}\n")
    for name, a, dt in arrays:
        buf.write(f"array {name} {dt} {'x'.join(map(str, a.shape)) or 'scalar'}\n")
    buf.write("end\n")
    with open(path, "wb") as f:
        f.write(buf.getvalue().encode("ascii"))
        for _, a, dt in arrays:
            f.write(np.ascontiguousarray(a, dtype=_DTYPES[dt]).tobytes())


def read_container(path) -> tuple[dict[str, str], dict[str, np.ndarray]]:
    """Parse a checkpoint into its header fields and named arrays."""
    data = Path(path).read_bytes()
    end = data.find(b"\nend\n")
    if not data.startswith(MAGIC.encode()) or end < 0:
        raise CheckpointError(f"{path}: not a checkpoint container")
    lines = data[:end].decode("ascii").split("\n")
    version = int(lines[0].split()[1])
    if version != VERSION:
        raise CheckpointError(f"{path}: unsupported format version {version}")
    header, specs = {}, []
    for line in lines[1:]:
        key, _, rest = line.partition(" ")
        if key == "array":
            name, dt, shape = rest.split()
            dims = () if shape == "scalar" else tuple(int(d) for d in shape.split("x"))
            specs.append((name, dt, dims))
        else:
            header[key] = rest
    off = end + len(b"\nend\n")
    arrays = {}
    for name, dt, dims in specs:
        if dt not in _DTYPES:
            raise CheckpointError(f"{path}: unknown dtype {dt}")
        count = int(np.prod(dims, dtype=np.int64))
        size = count * np.dtype(_DTYPES[dt]).itemsize
        if off + size > len(data):
            raise CheckpointError(f"{path}: truncated at byte offset {len(data)} reading {name}")
        arrays[name] = np.frombuffer(data, _DTYPES[dt], count, off).reshape(dims)
        off += size
    if off != len(data):
        raise CheckpointError(f"{path}: {len(data) - off} trailing bytes")
    return header, arrays


def _common_header(net: BuiltNetwork, payload: str) -> list[tuple[str, str]]:
    spec = net.spec
    h = [("payload", payload), ("structure", spec.structure), ("feedback", spec.feedback_mode),
         ("T", str(spec.T)), ("theta", str(spec.theta)),
         ("trainable", ",".join("1" if m else "0" for m in spec.trainable_mask)),
         ("seed", str(net.seed)), ("samples_seen", str(net.samples_seen)),
         ("thresholds", ",".join(str(l.threshold) for l in net.layers[1:]))]
    for f in fields(BuildParams):
        h.append((f"build.{f.name}", _fmt(getattr(net.params, f.name))))
    return h


def _feedback_arrays(net: BuiltNetwork) -> list[tuple[str, np.ndarray]]:
    out = [(f"dfa{l}", B) for l, B in sorted(net.dfa_feedback.items())]
    out += [(f"fa{e.index}", e.feedback) for e in net.error_layers]
    return out


def save_checkpoint(net: BuiltNetwork, path):
    """Integer payload: int8 weights, bit-exact round trip."""
    arrays = []
    for l, layer in enumerate(net.layers[1:], start=1):
        w = layer.kernel if layer.kernel is not None else layer.weights
        arrays.append((f"w{l}", w, "int8"))
    arrays += [(name, B, "int8") for name, B in _feedback_arrays(net)]
    _write(path, _common_header(net, "int8"), arrays)


def save_real_checkpoint(weights: dict[int, np.ndarray], feedback: dict[str, np.ndarray],
                         net: BuiltNetwork, path, scales: dict[int, float] | None = None):
    """Real payload: float32 weights with a per-layer quantization scale.

    ``net`` supplies the structure and header fields; ``weights`` maps layer
    index to real weights (dense matrices or conv kernels).
    """
    scales = scales or {}
    header = _common_header(net, "float32")
    header.append(("scales", ",".join(str(scales.get(l, 1.0)) for l in range(1, len(net.layers)))))
    arrays = [(f"w{l}", np.asarray(weights[l]), "float32") for l in sorted(weights)]
    arrays += [(k, np.asarray(v), "float32") for k, v in feedback.items()]
    _write(path, header, arrays)


def _parse_build(header: dict[str, str]) -> BuildParams:
    kw = {}
    for f in fields(BuildParams):
        raw = header.get(f"build.{f.name}")
        if raw is None or raw == "none":
            continue
        default = getattr(BuildParams(), f.name)
        if f.name == "threshold_scale":
            kw[f.name] = tuple(int(v) for v in raw.split(","))
        elif isinstance(default, bool):
            kw[f.name] = raw == "True"
        elif isinstance(default, float):
            kw[f.name] = float(raw)
        elif isinstance(default, int) or default is None:
            kw[f.name] = int(raw)
        else:
            kw[f.name] = raw
    return BuildParams(**kw)


def load_checkpoint(path) -> BuiltNetwork:
    """Rebuild a network from either payload variant.

    Real payloads are quantized on load with ``rint(w * scale)``.
    """
    header, arrays = read_container(path)
    try:
        mask = tuple(v == "1" for v in header["trainable"].split(","))
        spec = parse_structure(header["structure"], header["feedback"], int(header["T"]),
                               int(header["theta"]), mask)
        params = _parse_build(header)
        seed = int(header["seed"])
    except KeyError as e:
        raise CheckpointError(f"{path}: header lacks {e.args[0]}") from None
    real = header.get("payload") == "float32"
    scales = [float(s) for s in header["scales"].split(",")] if real else None

    def as_int(name, l=None):
        a = arrays[name]
        if real:
            s = scales[l - 1] if l is not None else 1.0
            a = np.clip(np.rint(a * s), -128, 127)
        return np.array(a, dtype=np.int64)

    kernels = {l: as_int(f"w{l}", l) for l, ls in enumerate(spec.layers) if ls.kind == "conv"}
    net = build_network(spec, seed, params, conv_kernels=kernels)
    for l, layer in enumerate(net.layers[1:], start=1):
        name = f"w{l}"
        if name not in arrays:
            raise CheckpointError(f"{path}: missing array {name}")
        w = as_int(name, l)
        if layer.kernel is not None:
            if w.shape != layer.kernel.shape:
                raise CheckpointError(f"{path}: {name} has shape {w.shape}, expected {layer.kernel.shape}")
            continue
        if w.shape != layer.weights.shape:
            raise CheckpointError(f"{path}: {name} has shape {w.shape}, expected {layer.weights.shape}")
        net.set_weights(l, w)
    for name, B in _feedback_arrays(net):
        if name not in arrays:
            raise CheckpointError(f"{path}: missing array {name}")
        src = as_int(name)
        if src.shape != B.shape:
            raise CheckpointError(f"{path}: {name} has shape {src.shape}, expected {B.shape}")
        B.setflags(write=True)
        B[...] = src
        B.setflags(write=False)
    expected = header.get("thresholds")
    if expected and expected != ",".join(str(l.threshold) for l in net.layers[1:]):
        raise CheckpointError(f"{path}: thresholds in header do not match the rebuilt network")
    net.samples_seen = int(header.get("samples_seen", 0))
    return net


def load_conv_kernels(path, spec) -> dict[int, np.ndarray]:
    """Pretrained conv kernels from a checkpoint, checked against ``spec``'s shapes."""
    header, arrays = read_container(path)
    real = header.get("payload") == "float32"
    scales = [float(s) for s in header["scales"].split(",")] if real else None
    out = {}
    for l, ls in enumerate(spec.layers):
        if ls.kind != "conv":
            continue
        name = f"w{l}"
        if name not in arrays:
            raise CheckpointError(f"{path}: no kernel for conv layer {l}")
        k = arrays[name]
        c_in = spec.layers[l - 1].shape[-1]
        want = (ls.kernel, ls.kernel, c_in, ls.filters)
        if k.shape != want:
            raise CheckpointError(f"{path}: kernel {name} has shape {k.shape}, expected {want}")
        if real:
            k = np.clip(np.rint(k * scales[l - 1]), -128, 127)
        out[l] = np.array(k, dtype=np.int64)
    return out
