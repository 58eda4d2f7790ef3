"""Two-layer recurrent generator with chunk and visual sentinels.

The bottom LSTM consumes the word embedding, the image descriptor and the top
layer's previous hidden state. From its state it derives two sentinels: the
chunk sentinel competes with the current regions for the shift gate, and the
visual sentinel competes with them for the attention that forms the context
vector. The top LSTM consumes the context vector and the bottom hidden state
and emits the word distribution.

Region features are bridged into the hidden-size value space by a learned
linear map; both the regions and the visual sentinel live there, so the
context vector is a plain convex combination.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field, asdict
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .data import ControlSignal, RegionSet, Sample
from .errors import CheckpointError, UsageError

CHECKPOINT_VERSION = 1


@dataclass
class ModelConfig:
    """Desk-scale defaults; the full-scale reference sizes are hidden=1000,
    word_emb=1000, attn=512 over 2048-d detector features."""

    vocab_size: int
    feat_dim: int = 64
    word_emb: int = 32
    hidden: int = 48
    attn: int = 32
    init_scale: float = 0.08


@dataclass
class StepState:
    h1: Tensor
    m1: Tensor
    h2: Tensor
    m2: Tensor
    pointer: int = 0
    gates_so_far: list = field(default_factory=list)


@dataclass
class StepOutput:
    word_logprobs: Tensor   # log-simplex over the vocabulary
    gate_prob: Tensor       # scalar in (0, 1)
    attention: Tensor       # (n+1)-simplex: regions then visual sentinel
    context: Tensor         # value-space context vector
    gate_joint: Tensor      # (n+1)-simplex sharing the gate denominator:
                            # chunk sentinel first, then the regions


class ModelParams:
    """All learnable weights, stored as named autodiff tensors."""

    def __init__(self, config: ModelConfig, tensors: dict[str, Tensor]):
        self.config = config
        self.tensors = tensors

    @classmethod
    def init(cls, config: ModelConfig, seed: int) -> "ModelParams":
        rng = np.random.default_rng(seed)
        d, a, e, df = config.hidden, config.attn, config.word_emb, config.feat_dim
        k1 = e + df + d          # word emb + image descriptor + top hidden
        k2 = d + d               # context vector + bottom hidden
        s = config.init_scale

        def w(*shape):
            return Tensor(rng.uniform(-s, s, size=shape), requires_grad=True)

        def zeros(*shape):
            return Tensor(np.zeros(shape), requires_grad=True)

        tensors = {
            "emb": w(config.vocab_size, e),
            "l1_W": w(4 * d, k1), "l1_U": w(4 * d, d), "l1_b": zeros(4 * d),
            "l2_W": w(4 * d, k2), "l2_U": w(4 * d, d), "l2_b": zeros(4 * d),
            "W_ig": w(d, k1), "W_hg": w(d, d),
            "W_is": w(d, k1), "W_hs": w(d, d),
            "W_sg": w(a, d), "W_sr": w(a, d), "W_ss": w(a, d), "W_g": w(a, d),
            "w_h": w(a),
            "W_rp": w(d, df),
            "W_out": w(config.vocab_size, d), "b_out": zeros(config.vocab_size),
        }
        return cls(config, tensors)

    def __getitem__(self, name) -> Tensor:
        return self.tensors[name]

    def items(self):
        return self.tensors.items()

    def zero_grads(self):
        for t in self.tensors.values():
            t.grad = None

    def num_params(self) -> int:
        return sum(t.size for t in self.tensors.values())

    def save(self, path):
        payload = {
            "version": CHECKPOINT_VERSION,
            "kind": "caption-model",
            "config": asdict(self.config),
            "params": {
                name: {"shape": list(t.shape), "data": t.data.ravel().tolist()}
                for name, t in self.tensors.items()
            },
        }
        Path(path).write_text(json.dumps(payload), encoding="utf-8")

    @classmethod
    def load(cls, path) -> "ModelParams":
        payload = _read_checkpoint(path, "caption-model")
        config = ModelConfig(**payload["config"])
        tensors = {}
        for name, rec in payload["params"].items():
            arr = np.array(rec["data"], dtype=np.float64).reshape(rec["shape"])
            tensors[name] = Tensor(arr, requires_grad=True)
        return cls(config, tensors)


def _read_checkpoint(path, kind):
    try:
        payload = json.loads(Path(path).read_text(encoding="utf-8"))
    except FileNotFoundError:
        raise CheckpointError(f"checkpoint not found: {path}") from None
    except json.JSONDecodeError as e:
        raise CheckpointError(f"checkpoint is not valid JSON: {e}") from None
    if payload.get("version") != CHECKPOINT_VERSION:
        raise CheckpointError(f"unsupported checkpoint version {payload.get('version')!r}")
    if payload.get("kind") != kind:
        raise CheckpointError(f"checkpoint kind {payload.get('kind')!r}, expected {kind!r}")
    return payload


def init_state(params: ModelParams) -> StepState:
    d = params.config.hidden
    z = lambda: Tensor(np.zeros(d))
    return StepState(h1=z(), m1=z(), h2=z(), m2=z())


def _lstm(W, U, b, x, h_prev, m_prev, d):
    z = W @ x + U @ h_prev + b
    i = ad.sigmoid(z[0:d])
    f = ad.sigmoid(z[d : 2 * d])
    o = ad.sigmoid(z[2 * d : 3 * d])
    g = ad.tanh(z[3 * d : 4 * d])
    m = f * m_prev + i * g
    h = o * ad.tanh(m)
    return h, m


def step(
    params: ModelParams,
    state: StepState,
    word_in: int,
    region_set: RegionSet | np.ndarray,
    image_desc: np.ndarray,
):
    """One decoding step; returns (StepOutput, new StepState).

    The new state keeps the caller's pointer/gate bookkeeping untouched;
    use advance_pointer once the gate value has been chosen.
    """
    cfg = params.config
    if not 0 <= word_in < cfg.vocab_size:
        raise UsageError(f"token id {word_in} outside vocabulary of size {cfg.vocab_size}")
    feats = region_set.feats() if isinstance(region_set, RegionSet) else np.asarray(region_set)
    if feats.ndim != 2 or feats.shape[0] == 0:
        raise UsageError("region set must contain at least one region")
    d = cfg.hidden
    p = params

    x = ad.concat([p["emb"][word_in], Tensor(image_desc), state.h2])
    h1, m1 = _lstm(p["l1_W"], p["l1_U"], p["l1_b"], x, state.h1, state.m1, d)

    # sentinels gated from the bottom-layer memory
    lc = ad.sigmoid(p["W_ig"] @ x + p["W_hg"] @ state.h1)
    sc = lc * ad.tanh(m1)
    lv = ad.sigmoid(p["W_is"] @ x + p["W_hs"] @ state.h1)
    sv = lv * ad.tanh(m1)

    gh = p["W_g"] @ h1
    zc = p["w_h"] @ ad.tanh(p["W_sg"] @ sc + gh)

    vals = Tensor(feats) @ ad.transpose(p["W_rp"])          # (n, hidden)
    zr = ad.tanh(vals @ ad.transpose(p["W_sr"]) + gh) @ p["w_h"]  # (n,)
    zv = p["w_h"] @ ad.tanh(p["W_ss"] @ sv + gh)

    gate_joint = ad.softmax(ad.concat([ad.reshape(zc, (1,)), zr]))
    gate_prob = ad.pick(gate_joint, 0)

    n = feats.shape[0]
    attention = ad.softmax(ad.concat([zr, ad.reshape(zv, (1,))]))
    context = attention[0:n] @ vals + ad.pick(attention, n) * sv

    h2, m2 = _lstm(p["l2_W"], p["l2_U"], p["l2_b"], ad.concat([context, h1]), state.h2, state.m2, d)
    word_logprobs = ad.log_softmax(p["W_out"] @ h2 + p["b_out"])

    out = StepOutput(
        word_logprobs=word_logprobs,
        gate_prob=gate_prob,
        attention=attention,
        context=context,
        gate_joint=gate_joint,
    )
    new_state = StepState(
        h1=h1, m1=m1, h2=h2, m2=m2,
        pointer=state.pointer, gates_so_far=list(state.gates_so_far),
    )
    return out, new_state


def advance_pointer(state: StepState, sampled_gate: bool, control: ControlSignal) -> StepState:
    """Move the region pointer: min(cumulative gate count, N), clamped."""
    g = 1 if sampled_gate else 0
    return StepState(
        h1=state.h1, m1=state.m1, h2=state.h2, m2=state.m2,
        pointer=min(state.pointer + g, len(control)),
        gates_so_far=state.gates_so_far + [g],
    )


def current_set(control: ControlSignal, pointer: int) -> RegionSet:
    """Region set addressed by a pointer; stays on the last set once clamped."""
    return control.sets[min(pointer, len(control) - 1)]


def teacher_forced_pass(params: ModelParams, sample: Sample) -> list[StepOutput]:
    """Run the model over a sample with ground-truth words and region sets."""
    control = sample.control
    image_desc = sample.image_desc
    caption = sample.caption
    state = init_state(params)
    bos = 0  # Vocab pins BOS at id 0
    outputs = []
    prev_word = bos
    for t, target in enumerate(caption.tokens):
        rset = control.sets[caption.region_seq[t]]
        out, state = step(params, state, prev_word, rset, image_desc)
        outputs.append(out)
        prev_word = target
    return outputs
