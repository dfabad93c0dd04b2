"""Checkpoint container: a text header followed by named float32 arrays.

Layout (all little-endian):

    voicesep-checkpoint v1\n
    kind=<separator|embedder>\n
    config=<single-line JSON>\n
    seed=<int>\n
    step=<int>\n
    arrays=<count>\n
    \n
    <name> <d0> <d1> ...\n   raw float32 bytes (d0*d1*... * 4)
    ... repeated per array ...

Array order is sorted by name so files are byte-reproducible. Optimizer
state rides along under the "adam." prefix, which lets a training run
resume mid-schedule with bit-identical arithmetic.
"""

import json
import numpy as np

from .errors import CheckpointError
from .autodiff import Tensor
from .model import ModelConfig, SeparatorModel, init_params
from .embedder import EmbedderConfig, EmbedderModel, init_embedder

MAGIC = "voicesep-checkpoint v1"
KINDS = ("separator", "embedder")


def save_checkpoint(path, kind: str, config: dict, seed: int, step: int,
                    arrays: dict) -> None:
    if kind not in KINDS:
        raise CheckpointError(f"unknown checkpoint kind {kind!r}")
    names = sorted(arrays)
    head = [MAGIC,
            f"kind={kind}",
            "config=" + json.dumps(config, sort_keys=True),
            f"seed={seed}",
            f"step={step}",
            f"arrays={len(names)}",
            ""]
    with open(path, "wb") as f:
        f.write("\n".join(head).encode("utf-8") + b"\n")
        for name in names:
            arr = np.asarray(arrays[name], dtype="<f4", order="C")
            dims = " ".join(str(d) for d in arr.shape)
            f.write(f"{name} {dims}".rstrip().encode("utf-8") + b"\n")
            f.write(arr.tobytes())


def load_checkpoint(path):
    """Read a container; returns (kind, config dict, seed, step, arrays)."""
    try:
        with open(path, "rb") as f:
            blob = f.read()
    except OSError as e:
        raise CheckpointError(f"cannot read checkpoint {path}: {e}") from e

    def take_line(off):
        nl = blob.find(b"\n", off)
        if nl < 0:
            raise CheckpointError(
                f"{path}: truncated header at byte {off}")
        return blob[off:nl].decode("utf-8", errors="replace"), nl + 1

    off = 0
    magic, off = take_line(off)
    if magic != MAGIC:
        raise CheckpointError(f"{path}: not a checkpoint (bad magic line)")
    fields = {}
    for key in ("kind", "config", "seed", "step", "arrays"):
        line, off = take_line(off)
        if not line.startswith(key + "="):
            raise CheckpointError(f"{path}: expected '{key}=' in header, "
                                  f"got {line!r}")
        fields[key] = line[len(key) + 1:]
    blank, off = take_line(off)
    if blank != "":
        raise CheckpointError(f"{path}: missing blank line after header")
    kind = fields["kind"]
    if kind not in KINDS:
        raise CheckpointError(f"{path}: unknown kind {kind!r}")
    try:
        config = json.loads(fields["config"])
        seed = int(fields["seed"])
        step = int(fields["step"])
        count = int(fields["arrays"])
    except ValueError as e:
        raise CheckpointError(f"{path}: malformed header field: {e}") from e

    arrays = {}
    for _ in range(count):
        line, off = take_line(off)
        parts = line.split()
        if not parts:
            raise CheckpointError(f"{path}: empty array record")
        name, dims = parts[0], tuple(int(d) for d in parts[1:])
        nbytes = 4 * int(np.prod(dims, dtype=np.int64)) if dims else 4
        if off + nbytes > len(blob):
            raise CheckpointError(
                f"{path}: array {name!r} truncated at byte {off}")
        arr = np.frombuffer(blob[off:off + nbytes], dtype="<f4")
        arrays[name] = arr.reshape(dims).copy()
        off += nbytes
    if off != len(blob):
        raise CheckpointError(
            f"{path}: {len(blob) - off} trailing bytes after last array")
    return kind, config, seed, step, arrays


def _split_optimizer(arrays: dict):
    params = {k: v for k, v in arrays.items() if not k.startswith("adam.")}
    opt = {k: v for k, v in arrays.items() if k.startswith("adam.")}
    return params, opt


def save_separator(path, model: SeparatorModel, seed: int, step: int,
                   optimizer=None) -> None:
    arrays = {name: p.data for name, p in model.named_parameters()}
    if optimizer is not None:
        arrays.update(optimizer.state_arrays())
    save_checkpoint(path, "separator", model.config.to_dict(), seed, step,
                    arrays)


def load_separator(path):
    """Returns (model, seed, step, optimizer-state arrays).

    Every array shape is validated against a fresh model built from the
    stored config, so a mangled file cannot silently load.
    """
    kind, config, seed, step, arrays = load_checkpoint(path)
    if kind != "separator":
        raise CheckpointError(f"{path}: kind {kind!r}, expected separator")
    cfg = ModelConfig.from_dict(config)
    model = init_params(cfg, seed=0)
    params, opt = _split_optimizer(arrays)
    _install(path, model, params)
    return model, seed, step, opt


def save_embedder(path, model: EmbedderModel, seed: int, step: int = 0,
                  optimizer=None) -> None:
    arrays = {name: p.data for name, p in model.named_parameters()}
    if optimizer is not None:
        arrays.update(optimizer.state_arrays())
    save_checkpoint(path, "embedder", model.config.to_dict(), seed, step,
                    arrays)


def load_embedder(path):
    kind, config, seed, step, arrays = load_checkpoint(path)
    if kind != "embedder":
        raise CheckpointError(f"{path}: kind {kind!r}, expected embedder")
    cfg = EmbedderConfig.from_dict(config)
    model = init_embedder(cfg, seed=0)
    params, _ = _split_optimizer(arrays)
    _install(path, model, params)
    return model, seed, step


def _install(path, model, params: dict) -> None:
    expected = dict(model.named_parameters())
    missing = sorted(set(expected) - set(params))
    extra = sorted(set(params) - set(expected))
    if missing or extra:
        raise CheckpointError(
            f"{path}: parameter names do not match config "
            f"(missing {missing[:3]}, unexpected {extra[:3]})")
    for name, tensor in expected.items():
        arr = params[name]
        if arr.shape != tensor.data.shape:
            raise CheckpointError(
                f"{path}: {name} has shape {arr.shape}, config implies "
                f"{tensor.data.shape}")
        tensor.data = arr.astype(np.float32)
