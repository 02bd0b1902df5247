"""Gated recurrent units built on the tape ops.

Gate order in the packed weight matrices is (reset, update, candidate).
The update rule follows the usual convention:

    r = sigmoid(W_ir x + b_ir + W_hr h + b_hr)
    z = sigmoid(W_iz x + b_iz + W_hz h + b_hz)
    n = tanh(W_in x + b_in + r * (W_hn h + b_hn))
    h' = (1 - z) * n + z * h
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .tensor import Tensor, as_tensor, concat, matmul, narrow, reshape, sigmoid, tanh

__all__ = ["GateWeights", "init_gate_weights", "gru_cell", "stacked_gru"]


@dataclass
class GateWeights:
    """Packed GRU cell weights.

    w_ih: [d_in, 3*d_h], w_hh: [d_h, 3*d_h], b_ih / b_hh: [3*d_h].
    """

    w_ih: Tensor
    w_hh: Tensor
    b_ih: Tensor
    b_hh: Tensor

    @property
    def hidden(self) -> int:
        return self.w_hh.shape[0]

    def tensors(self) -> dict[str, Tensor]:
        return {"w_ih": self.w_ih, "w_hh": self.w_hh,
                "b_ih": self.b_ih, "b_hh": self.b_hh}


def init_gate_weights(d_in: int, d_h: int, rng: np.random.Generator) -> GateWeights:
    """Uniform init in [-1/sqrt(d_h), 1/sqrt(d_h)] for all gate weights."""
    bound = 1.0 / np.sqrt(d_h)

    def u(*shape):
        return Tensor(rng.uniform(-bound, bound, size=shape).astype(np.float32),
                      requires_grad=True)

    return GateWeights(w_ih=u(d_in, 3 * d_h), w_hh=u(d_h, 3 * d_h),
                       b_ih=u(3 * d_h), b_hh=u(3 * d_h))


def _gates3(v: Tensor, h: int) -> tuple[Tensor, Tensor, Tensor]:
    return narrow(v, 0, 0, h), narrow(v, 0, h, h), narrow(v, 0, 2 * h, h)


def gru_cell(x, h, params: GateWeights) -> Tensor:
    """One GRU step.

    Args:
        x: input [d_in].
        h: previous hidden state [d_h].
        params: packed gate weights.

    Returns:
        New hidden state [d_h].
    """
    x, h = as_tensor(x), as_tensor(h)
    dh = params.hidden
    gi = matmul(x, params.w_ih) + params.b_ih
    gh = matmul(h, params.w_hh) + params.b_hh
    i_r, i_z, i_n = _gates3(gi, dh)
    h_r, h_z, h_n = _gates3(gh, dh)
    r = sigmoid(i_r + h_r)
    z = sigmoid(i_z + h_z)
    n = tanh(i_n + r * h_n)
    return n + z * (h - n)


def stacked_gru(seq, layers: list[GateWeights], h0=None) -> Tensor:
    """Run a stack of GRU layers over a sequence.

    Args:
        seq: [L, d_in] inputs, one row per step.
        layers: cell weights, first layer consumes the inputs.
        h0: optional list of initial hidden states; zeros when omitted.

    Returns:
        Top-layer hidden states, [L, d_h].
    """
    seq = as_tensor(seq)
    L = seq.shape[0]
    states = [as_tensor(np.zeros(p.hidden, dtype=np.float32)) if h0 is None else h0[i]
              for i, p in enumerate(layers)]
    # input-side projections for layer 0 are step-independent: hoist them
    gi_all = matmul(seq, layers[0].w_ih) + layers[0].b_ih
    outs = []
    for t in range(L):
        x = None
        for i, p in enumerate(layers):
            if i == 0:
                gi = reshape(narrow(gi_all, 0, t, 1), (3 * p.hidden,))
                h = states[0]
                gh = matmul(h, p.w_hh) + p.b_hh
                i_r, i_z, i_n = _gates3(gi, p.hidden)
                h_r, h_z, h_n = _gates3(gh, p.hidden)
                r = sigmoid(i_r + h_r)
                z = sigmoid(i_z + h_z)
                n = tanh(i_n + r * h_n)
                x = n + z * (h - n)
            else:
                x = gru_cell(x, states[i], p)
            states[i] = x
        outs.append(reshape(x, (1, layers[-1].hidden)))
    return concat(outs, axis=0)
