"""Generator (two-stream encoder, transposed-conv decoder), discriminator, Adam,
and the parameter checkpoint format."""
from __future__ import annotations

import re
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .autodiff import Tensor, ops
from .errors import DivergenceError, ParseError, ShapeError

PROB_EPS = 1e-7


def _he_uniform(rng, shape, fan_in, dtype):
    limit = np.sqrt(6.0 / fan_in)
    return rng.uniform(-limit, limit, size=shape).astype(dtype)


class _ParamBuilder:
    def __init__(self, seed, dtype):
        self.rng = np.random.default_rng(seed)
        self.dtype = dtype
        self.params: dict[str, Tensor] = {}

    def conv(self, name, cin, cout, k, dims):
        shape = (cout, cin) + (k,) * dims
        self.params[name + ".w"] = Tensor(_he_uniform(self.rng, shape, cin * k**dims, self.dtype),
                                          requires_grad=True, name=name + ".w")
        self.params[name + ".b"] = Tensor(np.zeros(cout, self.dtype), requires_grad=True, name=name + ".b")

    def tconv(self, name, cin, cout, k, dims):
        shape = (cin, cout) + (k,) * dims
        self.params[name + ".w"] = Tensor(_he_uniform(self.rng, shape, cin * k**dims, self.dtype),
                                          requires_grad=True, name=name + ".w")
        self.params[name + ".b"] = Tensor(np.zeros(cout, self.dtype), requires_grad=True, name=name + ".b")

    def dense(self, name, fin, fout):
        self.params[name + ".w"] = Tensor(_he_uniform(self.rng, (fout, fin), fin, self.dtype),
                                          requires_grad=True, name=name + ".w")
        self.params[name + ".b"] = Tensor(np.zeros(fout, self.dtype), requires_grad=True, name=name + ".b")


# --------------------------------------------------------------------------
# generator
# --------------------------------------------------------------------------

@dataclass
class GeneratorParams:
    dims: int
    channels: tuple[int, ...] = (16, 32, 64)
    gain: float = 0.1
    params: dict[str, Tensor] = field(default_factory=dict, repr=False)

    @property
    def levels(self) -> int:
        return len(self.channels)

    def tensors(self) -> list[Tensor]:
        return list(self.params.values())


def init_generator(dims: int = 2, channels=(16, 32, 64), gain: float = 0.1,
                   seed: int = 0, dtype=np.float32) -> GeneratorParams:
    """He-uniform kernels, zero biases, and a zero output kernel so that an
    untrained generator returns the identity map.

    Level 0 runs both streams at full resolution (stride-1 convolution in the
    fully convolutional stream); every deeper level halves the resolution, by
    max-pooling in the U-net stream and a stride-2 convolution in the other.
    """
    pb = _ParamBuilder(seed, dtype)
    cin = 2
    for level, c in enumerate(channels):
        pb.conv(f"enc{level}.unet", cin, c, 3, dims)
        pb.conv(f"enc{level}.fc", cin, c, 3, dims)
        pb.conv(f"enc{level}.fuse", 2 * c, c, 1, dims)
        cin = c
    for level in reversed(range(len(channels) - 1)):
        pb.tconv(f"dec{level}.up", channels[level + 1], channels[level], 2, dims)
        pb.conv(f"dec{level}.conv", 2 * channels[level], channels[level], 3, dims)
    pb.conv("out", channels[0], dims, 3, dims)
    pb.params["out.w"].data[:] = 0
    return GeneratorParams(dims, tuple(channels), gain, pb.params)


def generator_forward(p: GeneratorParams, I0, I1) -> Tensor:
    """Velocity field ``(B, *S, d)`` for a batch of image pairs ``(B, *S)``."""
    I0, I1 = Tensor(I0) if not isinstance(I0, Tensor) else I0, Tensor(I1) if not isinstance(I1, Tensor) else I1
    if I0.shape != I1.shape:
        raise ShapeError(f"source {I0.shape} and target {I1.shape} differ")
    B, S = I0.shape[0], I0.shape[1:]
    if len(S) != p.dims:
        raise ShapeError(f"generator is {p.dims}D, images are {len(S)}D")
    step = 2 ** (p.levels - 1)
    if any(n % step for n in S):
        raise ShapeError(f"spatial extents {S} must be divisible by {step}")
    W = p.params
    x = ops.concat([ops.reshape(I0, (B, 1) + S), ops.reshape(I1, (B, 1) + S)], axis=1)
    skips = []
    h = x
    for level in range(p.levels):
        pre = f"enc{level}"
        if level == 0:
            a = ops.relu(ops.conv(h, W[pre + ".unet.w"], W[pre + ".unet.b"]))
            f = ops.relu(ops.conv(h, W[pre + ".fc.w"], W[pre + ".fc.b"]))
        else:
            a = ops.relu(ops.conv(ops.max_pool(h), W[pre + ".unet.w"], W[pre + ".unet.b"]))
            f = ops.relu(ops.conv(h, W[pre + ".fc.w"], W[pre + ".fc.b"], stride=2))
        h = ops.relu(ops.conv(ops.concat([a, f], axis=1), W[pre + ".fuse.w"], W[pre + ".fuse.b"]))
        skips.append(h)
    for level in reversed(range(p.levels - 1)):
        pre = f"dec{level}"
        up = ops.relu(ops.transposed_conv(h, W[pre + ".up.w"], W[pre + ".up.b"], stride=2))
        h = ops.relu(ops.conv(ops.concat([up, skips[level]], axis=1), W[pre + ".conv.w"], W[pre + ".conv.b"]))
    v = ops.scalar_mul(ops.conv(h, W["out.w"], W["out.b"]), p.gain)
    return ops.transpose(v, (0,) + tuple(range(2, 2 + p.dims)) + (1,))


# --------------------------------------------------------------------------
# discriminator
# --------------------------------------------------------------------------

@dataclass
class DiscriminatorParams:
    dims: int
    input_shape: tuple[int, ...]
    channels: tuple[int, ...] = (8, 16, 32, 64, 64)
    dense: tuple[int, ...] = (256, 64, 1)
    params: dict[str, Tensor] = field(default_factory=dict, repr=False)

    def tensors(self) -> list[Tensor]:
        return list(self.params.values())


def init_discriminator(input_shape, channels=(8, 16, 32, 64, 64), dense=(256, 64, 1),
                       seed: int = 1, dtype=np.float32) -> DiscriminatorParams:
    input_shape = tuple(input_shape)
    dims = len(input_shape)
    factor = 2 ** len(channels)
    if any(n % factor for n in input_shape):
        raise ShapeError(f"discriminator input {input_shape} must be divisible by {factor}")
    pb = _ParamBuilder(seed, dtype)
    cin = 2
    for k, c in enumerate(channels):
        pb.conv(f"block{k}", cin, c, 3, dims)
        cin = c
    fin = channels[-1] * int(np.prod([n // factor for n in input_shape]))
    for k, fout in enumerate(dense):
        pb.dense(f"fc{k}", fin, fout)
        fin = fout
    return DiscriminatorParams(dims, input_shape, tuple(channels), tuple(dense), pb.params)


def discriminator_logit(p: DiscriminatorParams, I0w, I1) -> Tensor:
    I0w = I0w if isinstance(I0w, Tensor) else Tensor(I0w)
    I1 = I1 if isinstance(I1, Tensor) else Tensor(I1)
    if I0w.shape != I1.shape or tuple(I0w.shape[1:]) != p.input_shape:
        raise ShapeError(f"discriminator expects (B, {p.input_shape}) pairs, got {I0w.shape} and {I1.shape}")
    B, S = I0w.shape[0], I0w.shape[1:]
    W = p.params
    h = ops.concat([ops.reshape(I0w, (B, 1) + S), ops.reshape(I1, (B, 1) + S)], axis=1)
    for k in range(len(p.channels)):
        h = ops.max_pool(ops.relu(ops.conv(h, W[f"block{k}.w"], W[f"block{k}.b"])))
    h = ops.reshape(h, (B, -1))
    n = len(p.dense)
    for k in range(n):
        h = ops.dense(h, W[f"fc{k}.w"], W[f"fc{k}.b"])
        if k < n - 1:
            h = ops.relu(h)
    return ops.reshape(h, (B,))


def discriminator_forward(p: DiscriminatorParams, I0w, I1) -> Tensor:
    """Probability, per pair, that ``I0w`` is a registered source not produced by G."""
    prob = ops.sigmoid(discriminator_logit(p, I0w, I1))
    return ops.clip(prob, PROB_EPS, 1.0 - PROB_EPS)


# --------------------------------------------------------------------------
# Adam
# --------------------------------------------------------------------------

@dataclass
class AdamState:
    lr: float
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    m: dict = field(default_factory=dict, repr=False)
    v: dict = field(default_factory=dict, repr=False)


def adam_step(state: AdamState, params: dict, grads: dict):
    """Bias-corrected Adam update of ``params`` (name -> Tensor) in place."""
    for name, g in grads.items():
        if not np.all(np.isfinite(g)):
            raise DivergenceError(f"non-finite gradient for parameter {name!r}")
    state.step += 1
    t = state.step
    c1 = 1.0 - state.beta1**t
    c2 = 1.0 - state.beta2**t
    for name, p in params.items():
        g = grads.get(name)
        if g is None:
            continue
        m = state.m.get(name)
        if m is None:
            m = state.m[name] = np.zeros_like(p.data)
            state.v[name] = np.zeros_like(p.data)
        v = state.v[name]
        m *= state.beta1
        m += (1.0 - state.beta1) * g
        v *= state.beta2
        v += (1.0 - state.beta2) * g * g
        p.data -= (state.lr * (m / c1) / (np.sqrt(v / c2) + state.eps)).astype(p.dtype)
    return params, state


# --------------------------------------------------------------------------
# checkpoints
# --------------------------------------------------------------------------

CHECKPOINT_MAGIC = "LDDMMGAN-CHECKPOINT 1"


def save_checkpoint(path, tensors: dict, meta: dict | None = None) -> None:
    """Plain-text manifest followed by little-endian float32 payloads.

    ::

        LDDMMGAN-CHECKPOINT 1
        meta <key> <value>            (zero or more)
        tensor <name> <d0,d1,...>     (one per tensor, payload order)
        END
        <raw float32 LE bytes of each tensor, C order, concatenated>
    """
    lines = [CHECKPOINT_MAGIC]
    for k, v in (meta or {}).items():
        lines.append(f"meta {k} {v}")
    arrays = []
    for name, t in tensors.items():
        arr = np.asarray(t.data if isinstance(t, Tensor) else t)
        if re.search(r"\s", name):
            raise ValueError(f"tensor name {name!r} contains whitespace")
        lines.append(f"tensor {name} {','.join(str(n) for n in arr.shape)}")
        arrays.append(np.ascontiguousarray(arr, dtype="<f4"))
    lines.append("END")
    with open(path, "wb") as fh:
        fh.write(("\n".join(lines) + "\n").encode("ascii"))
        for arr in arrays:
            fh.write(arr.tobytes())


def load_checkpoint(path) -> tuple[dict, dict]:
    """Return ``(tensors, meta)`` with tensors as float32 arrays."""
    data = Path(path).read_bytes()
    end = data.find(b"\nEND\n")
    if not data.startswith(CHECKPOINT_MAGIC.encode()) or end < 0:
        raise ParseError(f"{path}: not a checkpoint (bad magic or missing END)")
    meta, manifest = {}, []
    for line in data[:end].decode("ascii").splitlines()[1:]:
        kind, _, rest = line.partition(" ")
        if kind == "meta":
            key, _, value = rest.partition(" ")
            meta[key] = value
        elif kind == "tensor":
            name, _, shape = rest.partition(" ")
            try:
                dims = tuple(int(n) for n in shape.split(",")) if shape else ()
            except ValueError:
                raise ParseError(f"{path}: bad shape {shape!r} for tensor {name}") from None
            manifest.append((name, dims))
        else:
            raise ParseError(f"{path}: unexpected header line {line!r}")
    offset = end + len(b"\nEND\n")
    tensors = {}
    for name, dims in manifest:
        n = int(np.prod(dims)) if dims else 1
        nbytes = 4 * n
        if offset + nbytes > len(data):
            raise ParseError(f"{path}: payload truncated in tensor {name}")
        tensors[name] = np.frombuffer(data, dtype="<f4", count=n, offset=offset).reshape(dims).astype(np.float32)
        offset += nbytes
    if offset != len(data):
        raise ParseError(f"{path}: {len(data) - offset} trailing bytes after payload")
    return tensors, meta


def generator_checkpoint(p: GeneratorParams, path, extra_meta: dict | None = None) -> None:
    meta = {"kind": "generator", "dims": p.dims, "channels": ",".join(map(str, p.channels)), "gain": repr(p.gain)}
    meta.update(extra_meta or {})
    save_checkpoint(path, p.params, meta)


def load_generator(path) -> tuple[GeneratorParams, dict]:
    tensors, meta = load_checkpoint(path)
    if meta.get("kind") != "generator":
        raise ParseError(f"{path}: not a generator checkpoint")
    channels = tuple(int(c) for c in meta["channels"].split(","))
    p = init_generator(int(meta["dims"]), channels, float(meta["gain"]))
    for name, arr in tensors.items():
        if name not in p.params or p.params[name].shape != arr.shape:
            raise ParseError(f"{path}: tensor {name} does not fit the declared architecture")
        p.params[name].data = arr.copy()
    return p, meta
