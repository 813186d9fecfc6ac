"""Real-arithmetic reference: rate-level two-phase learning and plain backprop.

The oracle works in the same units as the integer engine (weights in
8-bit weight units, thresholds, rates as spike counts per phase) but keeps
every quantity real-valued. A layer's rate is ``act(W h_prev)`` with either
``floor(u / theta)`` or its relaxation ``u / theta``, both clamped to
``[0, T]`` because a neuron fires at most once per step.

Error handling follows the engine: the loss pair counts ``target - h`` at
the output; under FA each hidden error pair integrates ``B e_up`` and
spikes ``eps / theta_err`` times, injecting ``g`` per spike; under DFA the
loss spikes reach each hidden layer through ``B`` directly. Corrections are
gated by the derivative of the activation (``h > 0``).
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .network import BuiltNetwork

ACTIVATIONS = ("floor", "relaxed")


@dataclass
class FpNetwork:
    weights: list[np.ndarray]  # W_l (n_l, n_{l-1}) for l = 1..L, real
    thresholds: list[float]  # theta_l for l = 1..L
    T: int
    feedback_mode: str = "DFA"
    feedback: dict[int, np.ndarray] = field(default_factory=dict)  # DFA: l -> (n_l, C); FA: l -> (n_l, n_up)
    gains: dict[int, float] = field(default_factory=dict)
    trainable: list[int] = field(default_factory=list)  # 1-based layer indices
    activation: str = "relaxed"
    error_theta: float = 64.0
    target_rate: float | None = None
    gate_output: bool = True

    def __post_init__(self):
        if self.activation not in ACTIVATIONS:
            raise ValueError(f"activation must be one of {ACTIVATIONS}")
        if self.feedback_mode not in ("FA", "DFA"):
            raise ValueError("feedback_mode must be FA or DFA")
        if len(self.thresholds) != len(self.weights):
            raise ValueError("one threshold per weight layer")
        for a, b in zip(self.weights, self.weights[1:]):
            if b.shape[1] != a.shape[0]:
                raise ValueError(f"layer shapes {a.shape} and {b.shape} do not chain")
        if not self.trainable:
            self.trainable = list(range(1, len(self.weights) + 1))
        for l in self.trainable:
            self.gains.setdefault(l, max(1.0, self.thresholds[l - 1] / self.T))

    @property
    def num_layers(self) -> int:
        return len(self.weights)

    @classmethod
    def from_built(cls, net: BuiltNetwork, activation: str = "relaxed") -> "FpNetwork":
        """Mirror a quantized network: same shapes, thresholds, gains and feedback matrices."""
        fb = {l: B.astype(np.float64) for l, B in net.dfa_feedback.items()}
        fb.update({e.index: e.feedback.astype(np.float64) for e in net.error_layers})
        p = net.params
        return cls(
            weights=[net.layers[l].weights.astype(np.float64) for l in range(1, len(net.layers))],
            thresholds=[float(net.layers[l].threshold) for l in range(1, len(net.layers))],
            T=net.T, feedback_mode=net.spec.feedback_mode, feedback=fb,
            gains={l: float(g) for l, g in net.gains.items()}, trainable=list(net.trainable),
            activation=activation, error_theta=float(net.loss_weight),
            target_rate=p.target_rate, gate_output=p.gate_output,
        )

    def copy(self) -> "FpNetwork":
        return FpNetwork([w.copy() for w in self.weights], list(self.thresholds), self.T, self.feedback_mode,
                         {k: v.copy() for k, v in self.feedback.items()}, dict(self.gains), list(self.trainable),
                         self.activation, self.error_theta, self.target_rate, self.gate_output)

    def act(self, u: np.ndarray, theta: float) -> np.ndarray:
        r = u / theta
        if self.activation == "floor":
            r = np.floor(r)
        return np.clip(r, 0.0, self.T)


def fp_forward(net: FpNetwork, x) -> list[np.ndarray]:
    """Rates of every layer, input first; also accepts a batch (N, n_in)."""
    h = [np.asarray(x, dtype=np.float64)]
    for W, th in zip(net.weights, net.thresholds):
        h.append(net.act(h[-1] @ W.T, th))
    return h


def _target(net: FpNetwork, label: int, C: int) -> np.ndarray:
    if not 0 <= label < C:
        raise ValueError(f"label {label} outside [0, {C})")
    t = np.zeros(C)
    t[label] = net.T if net.target_rate is None else net.target_rate
    return t


def corrections(net: FpNetwork, x, label: int, target_mask: np.ndarray | None = None):
    """Forward rates ``h`` and corrected rates ``h_hat`` for every layer.

    Error injections come from the phase-1 output error. Each trainable
    layer's corrected rate is driven by the corrected rates of the layer
    below, as in the second phase where the whole stack runs together.
    """
    h = fp_forward(net, x)
    L = net.num_layers
    target = _target(net, label, h[-1].size)
    e_out = target - h[L]
    if target_mask is not None:
        # masked classes are disabled: no target and no error
        e_out = e_out * target_mask
    if net.activation == "floor":
        e_out = np.trunc(e_out)
    gate = {l: (h[l] > 0).astype(np.float64) for l in range(1, L + 1)}
    out_gate = gate[L] if net.gate_output else 1.0
    inj = {}
    if L in net.trainable:
        inj[L] = out_gate * net.gains[L] * e_out
    hidden = [l for l in net.trainable if l != L]
    if net.feedback_mode == "DFA":
        for l in hidden:
            inj[l] = gate[l] * (net.feedback[l] @ e_out)
    else:
        e_up = e_out
        for l in sorted(hidden, reverse=True):
            e = gate[l] * (net.feedback[l] @ e_up) / net.error_theta
            if net.activation == "floor":
                e = np.trunc(e)
            inj[l] = net.gains[l] * e
            e_up = e
    h_hat = [hi.copy() for hi in h]
    for l in sorted(inj):
        u = h_hat[l - 1] @ net.weights[l - 1].T
        # the correction acts on the unclipped potential, so a neuron held far
        # below threshold needs a larger injection before it fires
        h_hat[l] = net.act(u + inj[l], net.thresholds[l - 1])
    return h, h_hat


def fp_emstdp_step(net: FpNetwork, x, label: int, eta: float = 0.125, mode: str | None = None,
                   target_mask: np.ndarray | None = None) -> dict[int, np.ndarray]:
    """Weight deltas ``eta * (h_hat - h) h_prev`` for every trainable layer.

    ``mode`` overrides the network's feedback mode (the matching feedback
    matrices must be present).
    """
    if mode is not None and mode != net.feedback_mode:
        net = FpNetwork(net.weights, net.thresholds, net.T, mode, net.feedback, net.gains, net.trainable,
                        net.activation, net.error_theta, net.target_rate, net.gate_output)
    h, h_hat = corrections(net, x, label, target_mask)
    return {l: eta * np.outer(h_hat[l] - h[l], h[l - 1]) for l in net.trainable}


def apply_deltas(net: FpNetwork, deltas: dict[int, np.ndarray], row_mask: np.ndarray | None = None):
    L = net.num_layers
    for l, d in deltas.items():
        if l == L and row_mask is not None:
            d = d * row_mask[:, None]
        net.weights[l - 1] += d


def loss(net: FpNetwork, x, label: int) -> float:
    """Half squared error between output rates and the target rates."""
    h = fp_forward(net, x)
    return 0.5 * float(np.sum((_target(net, label, h[-1].size) - h[-1]) ** 2))


def bp_gradient(net: FpNetwork, x, label: int) -> dict[int, np.ndarray]:
    """Exact gradients of ``loss`` under the relaxed activation.

    The activation ``clip(u / theta, 0, T)`` has derivative ``1/theta``
    inside its linear range and 0 outside it.
    """
    if net.activation != "relaxed":
        raise ValueError("bp_gradient needs the relaxed activation")
    h = fp_forward(net, x)
    L = net.num_layers
    us = [None] + [h[l - 1] @ net.weights[l - 1].T for l in range(1, L + 1)]
    target = _target(net, label, h[-1].size)
    grads = {}
    delta = -(target - h[L])
    for l in range(L, 0, -1):
        th = net.thresholds[l - 1]
        r = us[l] / th
        d = delta * (((r > 0) & (r < net.T)) / th)
        grads[l] = np.outer(d, h[l - 1])
        delta = net.weights[l - 1].T @ d
    return grads


def agreement_metric(a: dict | np.ndarray, b: dict | np.ndarray):
    """Cosine similarity and elementwise sign agreement, per layer for dicts."""
    if isinstance(a, dict):
        if set(a) != set(b):
            raise ValueError("layer sets differ")
        return {k: agreement_metric(a[k], b[k]) for k in a}
    a, b = np.asarray(a, dtype=np.float64), np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch {a.shape} vs {b.shape}")
    na, nb = np.linalg.norm(a), np.linalg.norm(b)
    cos = float(a.ravel() @ b.ravel() / (na * nb)) if na and nb else 0.0
    sign = float(np.mean(np.sign(a) == np.sign(b))) if a.size else 1.0
    return cos, sign


# -- training helpers ---------------------------------------------------------

def fp_train(net: FpNetwork, X: np.ndarray, Y: np.ndarray, eta: float = 0.125, epochs: int = 1,
             order=None, on_epoch=None):
    """Online, one sample at a time, like the engine."""
    for e in range(epochs):
        idx = range(len(X)) if order is None else order(e)
        for n in idx:
            apply_deltas(net, fp_emstdp_step(net, X[n], int(Y[n]), eta))
        if on_epoch is not None:
            on_epoch(e, net)
    return net


def fp_predict(net: FpNetwork, X: np.ndarray) -> np.ndarray:
    return np.argmax(fp_forward(net, np.asarray(X, dtype=np.float64))[-1], axis=1)


def fp_from_checkpoint(path, activation: str = "relaxed") -> FpNetwork:
    """FP mirror of a checkpoint; real payloads keep their unquantized dense weights."""
    from .checkpoint import load_checkpoint, read_container

    net = load_checkpoint(path)
    fp = FpNetwork.from_built(net, activation)
    header, arrays = read_container(path)
    if header.get("payload") == "float32":
        scales = [float(s) for s in header["scales"].split(",")]
        for l, layer in enumerate(net.layers[1:], start=1):
            if layer.kernel is None:
                fp.weights[l - 1] = arrays[f"w{l}"].astype(np.float64) * scales[l - 1]
    return fp


@dataclass
class DirectionStudy:
    hidden_cosine: list[float]  # per net, mean over probe samples
    output_sign_match: list[float]

    @property
    def mean_hidden_cosine(self) -> float:
        return float(np.mean(self.hidden_cosine))

    @property
    def mean_output_sign_match(self) -> float:
        return float(np.mean(self.output_sign_match))


def gradient_direction_study(n_nets: int = 20, sizes=(20, 10, 5), align_steps: int = 500,
                             align_eta: float = 0.01, probes: int = 20, eta: float = 0.125,
                             seed: int = 0) -> DirectionStudy:
    """Compare DFA deltas with the negative backprop gradient on small random nets.

    Each net first learns a random linear teacher for ``align_steps``
    online DFA steps, which lets its forward weights come into alignment
    with the fixed feedback matrix; ``align_steps=0`` measures the nets as
    initialized. Then ``probes`` fresh samples are scored.
    """
    n_in, n_hid, n_out = sizes
    hc, os_ = [], []
    for s in range(n_nets):
        r = np.random.default_rng([seed, s])
        W = [r.uniform(-8, 8, (n_hid, n_in)), r.uniform(-8, 8, (n_out, n_hid))]
        net = FpNetwork(W, [64.0, 64.0], 64, "DFA", {1: r.uniform(-8, 8, (n_hid, n_out))}, gate_output=True)
        teacher = r.normal(size=(n_out, n_in))

        def draw():
            x = r.integers(0, 65, n_in).astype(np.float64)
            return x, int(np.argmax(teacher @ (x - 32)))

        for _ in range(align_steps):
            x, y = draw()
            apply_deltas(net, fp_emstdp_step(net, x, y, align_eta))
        cos, sign = [], []
        for _ in range(probes):
            x, y = draw()
            d = fp_emstdp_step(net, x, y, eta)
            g = {l: -v for l, v in bp_gradient(net, x, y).items()}
            m = agreement_metric(d, g)
            cos.append(m[1][0])
            sign.append(m[2][1])
        hc.append(float(np.mean(cos)))
        os_.append(float(np.mean(sign)))
    return DirectionStudy(hc, os_)
