"""Network structure strings such as ``28x28x1-5x5k16c2s-3x3k8c2s-100d-10d``.

Tokens are joined by ``-``: an input ``WxHxC`` first, then convolutions
``KxKk<C>c<S>s`` (kernel, filters, stride; valid padding) and dense ``<D>d``
layers. The last layer must be dense; its width is the class count.
"""
from __future__ import annotations

import re
from dataclasses import dataclass, field

FEEDBACK_MODES = ("FA", "DFA")

_INPUT = re.compile(r"^(\d+)x(\d+)x(\d+)$")
_CONV = re.compile(r"^(\d+)x(\d+)kx?(\d+)c(\d+)s$")
_DENSE = re.compile(r"^(\d+)d$")


class StructureError(ValueError):
    pass


@dataclass(frozen=True)
class LayerSpec:
    kind: str  # "input" | "conv" | "dense"
    shape: tuple[int, ...]  # (W, H, C) for input/conv, (D,) for dense
    kernel: int = 0
    filters: int = 0
    stride: int = 1

    @property
    def size(self) -> int:
        n = 1
        for d in self.shape:
            n *= d
        return n

    def token(self) -> str:
        if self.kind == "input":
            return "x".join(map(str, self.shape))
        if self.kind == "conv":
            return f"{self.kernel}x{self.kernel}k{self.filters}c{self.stride}s"
        return f"{self.shape[0]}d"


def conv_output_dim(n: int, kernel: int, stride: int) -> int:
    """Valid-padding output length."""
    return (n - kernel) // stride + 1


@dataclass(frozen=True)
class NetworkSpec:
    layers: tuple[LayerSpec, ...]
    feedback_mode: str = "DFA"
    T: int = 64
    theta: int = 64
    trainable_mask: tuple[bool, ...] = field(default=())

    def __post_init__(self):
        if self.feedback_mode not in FEEDBACK_MODES:
            raise StructureError(f"feedback_mode must be FA or DFA, got {self.feedback_mode!r}")
        if self.T < 1 or self.theta < 1:
            raise StructureError("T and theta must be positive")
        if not self.trainable_mask:
            mask = tuple(l.kind == "dense" for l in self.layers)
            object.__setattr__(self, "trainable_mask", mask)
        mask = self.trainable_mask
        if len(mask) != len(self.layers):
            raise StructureError("trainable_mask must have one entry per layer")
        if mask[0]:
            raise StructureError("the input layer cannot be trainable")
        trainable = [i for i, m in enumerate(mask) if m]
        if trainable and trainable != list(range(trainable[0], len(mask))):
            # error channels chain downward from the loss, so plastic layers
            # must form the top of the stack
            raise StructureError("trainable layers must be a contiguous block ending at the output")

    @property
    def structure(self) -> str:
        return "-".join(l.token() for l in self.layers)

    @property
    def num_classes(self) -> int:
        return self.layers[-1].size

    @property
    def trainable(self) -> list[int]:
        return [i for i, m in enumerate(self.trainable_mask) if m]


def parse_structure(text: str, feedback_mode: str = "DFA", T: int = 64, theta: int = 64,
                    trainable_mask: tuple[bool, ...] = ()) -> NetworkSpec:
    tokens = [t.strip().replace(" ", "") for t in text.strip().split("-")]
    if not tokens or not tokens[0]:
        raise StructureError("empty structure string")
    m = _INPUT.match(tokens[0])
    if not m:
        raise StructureError(f"structure must start with an input layer WxHxC, got {tokens[0]!r}")
    w, h, c = map(int, m.groups())
    if min(w, h, c) < 1:
        raise StructureError("input dimensions must be positive")
    layers = [LayerSpec("input", (w, h, c))]
    for tok in tokens[1:]:
        prev = layers[-1]
        if m := _CONV.match(tok):
            k1, k2, f, s = map(int, m.groups())
            if k1 != k2:
                raise StructureError(f"only square kernels are supported: {tok!r}")
            if prev.kind == "dense":
                raise StructureError(f"convolution {tok!r} cannot follow a dense layer")
            if min(k1, f, s) < 1:
                raise StructureError(f"bad convolution parameters in {tok!r}")
            pw, ph, _ = prev.shape
            ow, oh = conv_output_dim(pw, k1, s), conv_output_dim(ph, k1, s)
            if ow < 1 or oh < 1:
                raise StructureError(f"kernel of {tok!r} does not fit a {pw}x{ph} input")
            layers.append(LayerSpec("conv", (ow, oh, f), kernel=k1, filters=f, stride=s))
        elif m := _DENSE.match(tok):
            d = int(m.group(1))
            if d < 1:
                raise StructureError(f"dense width must be positive: {tok!r}")
            layers.append(LayerSpec("dense", (d,)))
        else:
            raise StructureError(f"malformed layer token {tok!r}")
    if len(layers) < 2 or layers[-1].kind != "dense":
        raise StructureError("the last layer must be dense (one unit per class)")
    return NetworkSpec(tuple(layers), feedback_mode, T, theta, tuple(trainable_mask))
