"""Dual-path spiking network trained with the two-phase EMSTDP schedule.

The forward path is a stack of integrate-and-fire populations. The error
path starts at a pair of loss populations per output class (positive and
negative channel) that compare the label train with the output train. Under
FA the error is carried down through one gated positive/negative pair per
hidden trainable layer, cross-connected through fixed random matrices; under
DFA the loss spikes are broadcast straight into every hidden layer.

Per sample: phase 1 (T steps) measures the uncorrected counts ``h``; phase 2
(T more steps) enables the label, loss and error populations so the forward
neurons settle at corrected counts ``h_hat``; the weights are updated once at
2T from synapse-local traces, then all state is cleared.

Within one step spikes travel through the forward path and then down the
error path without delay; error spikes reach the forward neurons on the next
step.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .neuron import POTENTIAL_LIMIT, CompartmentConfig, PhaseTraces, Population
from .plasticity import WEIGHT_MAX, WEIGHT_MIN, LearningParams, commit_layer, emstdp_weight_delta
from .structure import LayerSpec, NetworkSpec


@dataclass(frozen=True)
class BuildParams:
    """Scaling choices that the algorithm leaves open.

    ``threshold_scale`` maps a layer to its integer threshold
    ``theta * scale``; ``None`` derives hidden layers' scale from fan-in
    and uses ``output_scale`` for the classifier. Initial weights are
    uniform integers in ``[-init_frac*127, init_frac*127]``; the output layer's
    lower bound is scaled by ``output_init_low`` (values below 1 skew the
    classifier towards firing so no class starts silent). ``gain_scale``
    multiplies the injection weight ``theta / T`` of every error spike.
    Feedback matrices are uniform in ``[-feedback_scale, feedback_scale]``:
    under DFA in units of the receiving hidden layer's potential, under FA
    into the error neurons. ``gate_output`` blocks error injection into
    output neurons that were silent in phase 1; the loss pair itself always
    fires, so feedback to hidden layers carries the raw output error.
    """

    threshold_scale: tuple[int, ...] | None = None
    fanin_per_scale: int = 32
    output_scale: int = 32
    init_frac: float = 0.5
    output_init_low: float = 0.25
    gain_scale: int = 2
    dfa_feedback_scale: int = 30
    fa_feedback_scale: int = 48
    error_theta: int | None = None  # None: share theta with the forward path
    gate_output: bool = True
    reset: str = "subtract"
    pre_window: str = "phase1"
    boundary_reset: bool = True
    target_rate: int | None = None  # None: T


@dataclass
class ForwardLayer:
    spec: LayerSpec
    threshold: int
    scale: int
    trainable: bool
    weights: np.ndarray | None = None  # (n_out, n_in) int64
    mask: np.ndarray | None = None  # connectivity, conv layers only
    kernel: np.ndarray | None = None  # (k, k, c_in, c_out) for conv layers

    @property
    def size(self) -> int:
        return self.spec.size


@dataclass
class ErrorLayer:
    """Positive/negative channel pair paired with forward layer ``index``."""

    index: int
    size: int
    threshold: int
    feedback: np.ndarray | None = None  # (size, upstream size); None for the loss pair


@dataclass
class BuiltNetwork:
    spec: NetworkSpec
    params: BuildParams
    seed: int
    layers: list[ForwardLayer]
    loss: ErrorLayer
    error_layers: list[ErrorLayer]  # FA hidden pairs, top-down
    dfa_feedback: dict[int, np.ndarray]  # forward layer -> (n_l, classes)
    gains: dict[int, int]  # forward layer -> injection weight per error spike
    loss_weight: int
    samples_seen: int = 0
    _wf: dict[int, np.ndarray] = field(default_factory=dict, repr=False, compare=False)
    _last_run: object = field(default=None, repr=False, compare=False)

    @property
    def T(self) -> int:
        return self.spec.T

    @property
    def trainable(self) -> list[int]:
        return self.spec.trainable

    def error_path_neurons(self) -> int:
        """Neurons on the feedback path (each channel counted)."""
        return 2 * (self.loss.size + sum(e.size for e in self.error_layers))

    def weights_f(self, l: int) -> np.ndarray:
        w = self._wf.get(l)
        if w is None:
            w = self._wf[l] = self.layers[l].weights.astype(np.float64)
        return w

    def set_weights(self, l: int, w: np.ndarray):
        self.layers[l].weights = w
        self._wf.pop(l, None)

    def copy(self) -> "BuiltNetwork":
        import copy
        net = copy.deepcopy(self)
        net._wf, net._last_run = {}, None
        return net


# -- construction -------------------------------------------------------------

def conv_matrix(in_shape, spec: LayerSpec, kernel: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Dense (n_out, n_in) weight matrix and mask for a valid-padding convolution.

    Neurons are indexed row-major over (x, y, channel).
    """
    W, H, C = in_shape
    OW, OH, F = spec.shape
    k, s = spec.kernel, spec.stride
    mat = np.zeros((OW * OH * F, W * H * C), dtype=np.int64)
    mask = np.zeros(mat.shape, dtype=bool)
    for ox in range(OW):
        for oy in range(OH):
            for dx in range(k):
                for dy in range(k):
                    x, y = ox * s + dx, oy * s + dy
                    for c in range(C):
                        i = (x * H + y) * C + c
                        o = (ox * OH + oy) * F
                        mat[o:o + F, i] = kernel[dx, dy, c, :]
                        mask[o:o + F, i] = True
    return mat, mask


def _quantize(real: np.ndarray) -> np.ndarray:
    return np.clip(np.rint(real), WEIGHT_MIN, WEIGHT_MAX).astype(np.int64)


def layer_scale(spec: NetworkSpec, params: BuildParams, l: int) -> int:
    if params.threshold_scale is not None:
        return int(params.threshold_scale[l - 1])
    if l == len(spec.layers) - 1:
        return params.output_scale
    fan_in = spec.layers[l - 1].size if spec.layers[l].kind == "dense" else \
        spec.layers[l].kernel ** 2 * spec.layers[l - 1].shape[-1]
    return max(1, fan_in // params.fanin_per_scale)


def build_network(spec: NetworkSpec, seed: int | None, params: BuildParams = BuildParams(),
                  conv_kernels: dict[int, np.ndarray] | None = None) -> BuiltNetwork:
    """Instantiate forward weights, error channels and fixed feedback matrices."""
    if seed is None:
        raise ValueError("build_network needs an explicit seed")
    rng = np.random.default_rng(seed)
    theta, T = spec.theta, spec.T
    if params.threshold_scale is not None and len(params.threshold_scale) != len(spec.layers) - 1:
        raise ValueError("threshold_scale needs one entry per non-input layer")

    layers = [ForwardLayer(spec.layers[0], theta, 1, False)]
    amp = params.init_frac * WEIGHT_MAX
    for l in range(1, len(spec.layers)):
        ls = spec.layers[l]
        s = layer_scale(spec, params, l)
        fl = ForwardLayer(ls, theta * s, s, spec.trainable_mask[l])
        n_in = spec.layers[l - 1].size
        if ls.kind == "conv":
            c_in = spec.layers[l - 1].shape[-1]
            if conv_kernels is not None and l in conv_kernels:
                kern = np.asarray(conv_kernels[l], dtype=np.int64)
            else:
                kern = _quantize(rng.uniform(-amp, amp, (ls.kernel, ls.kernel, c_in, ls.filters)))
            fl.kernel = kern
            fl.weights, fl.mask = conv_matrix(spec.layers[l - 1].shape, ls, kern)
        else:
            low = amp * (params.output_init_low if l == len(spec.layers) - 1 else 1.0)
            fl.weights = _quantize(rng.uniform(-low, amp, (ls.size, n_in)))
        layers.append(fl)

    err_theta = params.error_theta or theta
    C = spec.num_classes
    loss = ErrorLayer(len(layers) - 1, C, err_theta)
    gains = {l: params.gain_scale * max(1, layers[l].threshold // T) for l in spec.trainable}
    hidden = [l for l in spec.trainable if l != len(layers) - 1]
    error_layers: list[ErrorLayer] = []
    dfa: dict[int, np.ndarray] = {}
    if spec.feedback_mode == "FA":
        up = C
        for l in reversed(hidden):
            n = layers[l].size
            b = params.fa_feedback_scale
            B = _quantize(rng.uniform(-b, b, (n, up)))
            error_layers.append(ErrorLayer(l, n, err_theta, B))
            up = n
    else:
        for l in hidden:
            b = params.dfa_feedback_scale
            dfa[l] = _quantize(rng.uniform(-b, b, (layers[l].size, C)))
    for m in list(dfa.values()) + [e.feedback for e in error_layers]:
        m.setflags(write=False)
    return BuiltNetwork(spec, params, seed, layers, loss, error_layers, dfa, gains, err_theta)


# -- encoding -------------------------------------------------------------------

def encode_input_bias(x, T: int, theta: int) -> np.ndarray:
    """Input neuron biases; with theta == T neuron i fires exactly x[i] times per phase."""
    b = np.asarray(x, dtype=np.int64).ravel()
    if b.size and (b.min() < 0 or b.max() > T):
        raise ValueError(f"input components must lie in [0, {T}]")
    return b


def encode_label_bias(label: int | None, num_classes: int, T: int, rate: int | None = None) -> np.ndarray:
    """Bias of the label neurons: the true class fires at the target rate, others stay silent."""
    b = np.zeros(num_classes, dtype=np.int64)
    if label is None:
        return b
    if not 0 <= int(label) < num_classes:
        raise ValueError(f"label {label} outside [0, {num_classes})")
    b[int(label)] = T if rate is None else rate
    return b


@dataclass
class Sample:
    x: np.ndarray  # quantized to [0, T]
    label: int | None = None


# -- simulation -----------------------------------------------------------------

class _Run:
    """Mutable per-sample state of one network: populations, traces, rasters."""

    def __init__(self, net: BuiltNetwork):
        p = net.params
        cfg = lambda th: CompartmentConfig(threshold=th, reset=p.reset)  # noqa: E731
        self.pops = [Population(l.size, cfg(l.threshold)) for l in net.layers]
        self.traces = [PhaseTraces.zeros(l.size, p.pre_window) for l in net.layers]
        C = net.spec.num_classes
        self.label = Population(C, CompartmentConfig(threshold=net.spec.theta, reset=p.reset))
        self.loss_pos = Population(C, cfg(net.loss.threshold))
        self.loss_neg = Population(C, cfg(net.loss.threshold))
        self.err = {e.index: (Population(e.size, cfg(e.threshold)), Population(e.size, cfg(e.threshold)))
                    for e in net.error_layers}
        self.injected = {l: np.zeros(net.layers[l].size, dtype=np.int64) for l in net.trainable}
        self.loss_spikes = (np.zeros(C, dtype=np.int64), np.zeros(C, dtype=np.int64))
        self.rasters: list[np.ndarray | None] = [None] * len(net.layers)
        self.static_drive: np.ndarray | None = None
        self.phase = 0

    def populations(self):
        yield from self.pops
        yield from (self.label, self.loss_pos, self.loss_neg)
        for a, b in self.err.values():
            yield a
            yield b


def _integrate_layer(pop: Population, drive: np.ndarray | None, T: int) -> np.ndarray:
    return pop.run(drive, T)


def _drive(raster: np.ndarray, w: np.ndarray) -> np.ndarray:
    # float64 matmul is exact here: |sums| stay far below 2**53
    return (raster.astype(np.float64) @ w.T).astype(np.int64)


def run_phase1(net: BuiltNetwork, sample: Sample, run: _Run | None = None) -> list[PhaseTraces]:
    """T steps of the forward path alone; fills ``h`` and freezes the pre traces."""
    run = run or _Run(net)
    T = net.T
    run.pops[0].bias = encode_input_bias(sample.x, T, net.spec.theta)
    for l, pop in enumerate(run.pops):
        drive = None if l == 0 else _drive(run.rasters[l - 1], net.weights_f(l))
        if net.trainable and l == net.trainable[0]:
            run.static_drive = drive
        run.rasters[l] = _integrate_layer(pop, drive, T)
        run.traces[l].record_counts(run.rasters[l].sum(axis=0), 1)
    run.phase = 1
    net._last_run = run
    return run.traces


def _row_abs_max(m: np.ndarray) -> int:
    return int(np.abs(m).sum(axis=1).max(initial=0))


def _relax_checks(net: BuiltNetwork, run: _Run, first: int, T: int):
    """Drop per-step range checks on populations whose potential provably stays in range."""
    L = len(net.layers) - 1
    peak = {}
    for l in range(first, L + 1):
        inj = 0
        if l in net.dfa_feedback:
            inj = _row_abs_max(net.dfa_feedback[l])
        elif l in net.gains:
            inj = net.gains[l]
        peak[run.pops[l]] = _row_abs_max(net.layers[l].weights) + inj
    for p in (run.label, run.loss_pos, run.loss_neg):
        peak[p] = net.loss_weight
    for e in net.error_layers:
        for p in run.err[e.index]:
            peak[p] = _row_abs_max(e.feedback)
    for p, d in peak.items():
        p.strict = p.potential_bound(d, T) >= POTENTIAL_LIMIT


def run_phase2(net: BuiltNetwork, sample: Sample, run: _Run | None = None,
               target_mask: np.ndarray | None = None) -> list[PhaseTraces]:
    """Steps T..2T with label, loss and error populations enabled.

    ``target_mask`` (bool per class) disables masked-out classes: no label
    target and a silent loss pair, so they neither learn nor send error.
    """
    run = run or net._last_run
    if run.phase != 1:
        raise RuntimeError("phase 2 must follow phase 1 without a reset")
    p, T = net.params, net.T
    L = len(net.layers) - 1
    trainable = net.trainable
    first = trainable[0] if trainable else L + 1

    label_bias = encode_label_bias(sample.label, net.spec.num_classes, T, p.target_rate)
    live = 1
    if target_mask is not None:
        live = np.asarray(target_mask, dtype=np.int64)
        label_bias = label_bias * live
    run.label.bias = label_bias

    gates = {l: run.traces[l].h >= 1 for l in trainable}
    # the loss pair always fires; the output gate only blocks its injection
    # back into silent output neurons, so feedback still sees the raw error
    out_gate = gates[L].astype(np.int64) if p.gate_output and L in gates else 1

    if p.boundary_reset:
        for l in range(first, L + 1):
            run.pops[l].v[:] = 0
            run.pops[l].u[:] = 0
    static = p.boundary_reset and first <= L
    if not static:
        # lower layers keep running; their drive has to be recomputed each step
        first = 1

    if static:
        for l in range(first):
            run.traces[l].record_counts(run.rasters[l].sum(axis=0), 2)
    _relax_checks(net, run, first, T)
    nz = {l: (B != 0).astype(np.int64) for l, B in net.dfa_feedback.items()}
    inj = {l: 0 for l in trainable}
    ras = {l: np.zeros((T, net.layers[l].size), dtype=bool) for l in range(first, L + 1)}
    spk = [None] * (L + 1)
    wL = net.loss_weight
    fa = net.spec.feedback_mode == "FA"
    lab_raster = run.label.run(None, T).astype(np.int64) if trainable else None
    for t in range(T):
        if static:
            spk[first - 1] = run.rasters[first - 1][t]
        else:
            spk[0] = ras0 = run.pops[0].step(0)
            run.traces[0].record(ras0, 2)
        for l in range(first, L + 1):
            if l == first and static and run.static_drive is not None:
                d = run.static_drive[t]
            else:
                d = (spk[l - 1] @ net.weights_f(l).T).astype(np.int64)
            if l in inj:
                d = d + inj[l]
            spk[l] = ras[l][t] = run.pops[l].step(d)
        if not trainable:
            continue
        diff = wL * (lab_raster[t] - spk[L]) * live
        ep = run.loss_pos.step(diff).astype(np.int64)
        en = run.loss_neg.step(-diff).astype(np.int64)
        e_sig = ep - en
        if not e_sig.any() and not fa:
            inj = {l: 0 for l in trainable}
            continue
        run.loss_spikes[0][:] += ep
        run.loss_spikes[1][:] += en
        if L in inj:
            inj[L] = net.gains[L] * e_sig * out_gate
            run.injected[L] += (ep + en) * out_gate
        if fa:
            up = e_sig
            for e in net.error_layers:
                d = e.feedback @ up
                pos, neg = run.err[e.index]
                a_ = pos.step(d, gates[e.index]).astype(np.int64)
                b_ = neg.step(-d, gates[e.index]).astype(np.int64)
                up = a_ - b_
                inj[e.index] = net.gains[e.index] * up
                run.injected[e.index] += a_ + b_
        else:
            n_spk = ep + en
            for l, B in net.dfa_feedback.items():
                g = gates[l]
                inj[l] = g * (B @ e_sig)
                run.injected[l] += g * (nz[l] @ n_spk)
    for l in range(first, L + 1):
        run.traces[l].record_counts(ras[l].sum(axis=0), 2)
    run.phase = 2
    return run.traces


@dataclass
class SampleMetrics:
    predicted: int
    output_counts: np.ndarray
    output_corrected: np.ndarray
    weight_change: dict[int, float]


def train_sample(net: BuiltNetwork, sample: Sample, params: LearningParams,
                 class_mask: np.ndarray | None = None) -> SampleMetrics:
    """Phase 1, phase 2, one weight update at 2T, then reset.

    ``class_mask`` marks the output classes that may learn; masked classes get
    no label target and their incoming weights are frozen.
    """
    if sample.label is None:
        raise ValueError("training needs a label")
    run = _Run(net)
    run_phase1(net, sample, run)
    run_phase2(net, sample, run, target_mask=class_mask)
    L = len(net.layers) - 1
    changes = {}
    for l in net.trainable:
        delta = emstdp_weight_delta(run.traces[l], run.traces[l - 1].pre_frozen, params)
        row_mask = class_mask if (l == L and class_mask is not None) else None
        key = (net.seed, l, net.samples_seen)
        old = net.layers[l].weights
        new = commit_layer(old, delta, params, key, row_mask)
        if new is not old:
            net.set_weights(l, new)
        changes[l] = float(np.linalg.norm((new - old).astype(np.float64)))
    net.samples_seen += 1
    counts = run.traces[L].h.copy()
    m = SampleMetrics(int(np.argmax(counts)), counts, run.traces[L].h_hat.copy(), changes)
    net._last_run = None
    return m


def infer_sample(net: BuiltNetwork, sample: Sample) -> int:
    """Phase 1 only; the class with the most output spikes (lowest index on ties)."""
    run = _Run(net)
    run_phase1(net, sample, run)
    net._last_run = None
    return int(np.argmax(run.traces[-1].h))


def output_counts_batch(net: BuiltNetwork, X: np.ndarray, chunk: int = 256) -> np.ndarray:
    """Phase-1 output spike counts for many samples at once, (N, classes).

    Same integer arithmetic as ``run_phase1``, with a batch axis.
    """
    X = np.asarray(X, dtype=np.int64).reshape(len(X), -1)
    T = net.T
    out = []
    for s in range(0, len(X), chunk):
        xb = X[s:s + chunk]
        encode_input_bias(xb, T, net.spec.theta)
        p = net.params
        raster = None
        for l, layer in enumerate(net.layers):
            pop = Population(layer.size, CompartmentConfig(threshold=layer.threshold, reset=p.reset),
                             batch=len(xb))
            if l == 0:
                pop.bias = xb
                raster = _integrate_layer(pop, None, T)
            else:
                raster = _integrate_layer(pop, _drive(raster, net.weights_f(l)), T)
        out.append(raster.sum(axis=0))
    return np.concatenate(out) if out else np.zeros((0, net.spec.num_classes), dtype=np.int64)


def infer_batch(net: BuiltNetwork, X: np.ndarray) -> np.ndarray:
    return np.argmax(output_counts_batch(net, X), axis=1)


def predict_counts(counts: Sequence[int]) -> int:
    return int(np.argmax(np.asarray(counts)))
