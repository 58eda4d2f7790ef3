"""Inference-time generation over the joint word x gate action space.

Every emitted token is an action pair (word, gate); its score is
log p(word) + log p(gate). The gate chosen at the EOS step is recorded and
scored but never moves the pointer, which keeps greedy and width-1 beam
identical. Finished hypotheses are ranked by length-normalized log-prob.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .data import ControlSignal
from .errors import UsageError
from .model import ModelParams, advance_pointer, current_set, init_state, step

BOS_ID = 0  # pinned by data.Vocab
EOS_ID = 1

MAX_LEN_DEFAULT = 30
_LOG_EPS = 1e-12


def _gate_logp(p: float, gate: int) -> float:
    return math.log(max(p if gate else 1.0 - p, _LOG_EPS))


def greedy_decode(params: ModelParams, image_desc, control: ControlSignal, max_len=MAX_LEN_DEFAULT):
    """Argmax word and argmax gate at every step; stops at EOS or max_len."""
    if len(control) == 0:
        raise UsageError("control signal must contain at least one region set")
    tokens, gates = [], []
    with ad.no_grad():
        state = init_state(params)
        prev = BOS_ID
        for _ in range(max_len):
            out, state = step(params, state, prev, current_set(control, state.pointer), image_desc)
            word = int(np.argmax(out.word_logprobs.data))
            gate = int(out.gate_prob.item() > 0.5)
            tokens.append(word)
            gates.append(gate)
            if word == EOS_ID:
                break
            state = advance_pointer(state, gate, control)
            prev = word
    return tokens, gates


def sample_decode(params: ModelParams, image_desc, control: ControlSignal, rng, max_len=MAX_LEN_DEFAULT, temperature=1.0):
    """Multinomial word and Bernoulli gate samples; returns the action log-prob.

    temperature=0 degenerates to greedy_decode.
    """
    if len(control) == 0:
        raise UsageError("control signal must contain at least one region set")
    if temperature == 0.0:
        tokens, gates = greedy_decode(params, image_desc, control, max_len)
        return tokens, gates, sequence_logprob_value(params, image_desc, control, tokens, gates)
    tokens, gates = [], []
    logp = 0.0
    with ad.no_grad():
        state = init_state(params)
        prev = BOS_ID
        for _ in range(max_len):
            out, state = step(params, state, prev, current_set(control, state.pointer), image_desc)
            lp = out.word_logprobs.data
            if temperature != 1.0:
                lp = lp / temperature
                lp = lp - lp.max()
                probs = np.exp(lp)
                probs /= probs.sum()
            else:
                probs = np.exp(lp)
                probs /= probs.sum()
            word = int(rng.choice(len(probs), p=probs))
            p_gate = out.gate_prob.item()
            gate = int(rng.random() < p_gate)
            tokens.append(word)
            gates.append(gate)
            logp += float(out.word_logprobs.data[word]) + _gate_logp(p_gate, gate)
            if word == EOS_ID:
                break
            state = advance_pointer(state, gate, control)
            prev = word
    return tokens, gates, logp


@dataclass
class _Hyp:
    tokens: list
    gates: list
    state: object
    prev: int
    logp: float


def beam_decode(params: ModelParams, image_desc, control: ControlSignal, beam_size=5, max_len=MAX_LEN_DEFAULT):
    """Beam search over (word, gate) pairs; per-hypothesis pointers advance
    independently. Returns up to beam_size (tokens, gates, score) tuples
    sorted by length-normalized log-prob, best first."""
    if beam_size < 1:
        raise UsageError(f"beam size must be >= 1, got {beam_size}")
    if len(control) == 0:
        raise UsageError("control signal must contain at least one region set")

    finished = []  # (norm_score, tokens, gates)
    with ad.no_grad():
        beam = [_Hyp([], [], init_state(params), BOS_ID, 0.0)]
        for _ in range(max_len):
            candidates = []
            for hyp in beam:
                out, state = step(
                    params, hyp.state, hyp.prev, current_set(control, hyp.state.pointer), image_desc
                )
                word_lp = out.word_logprobs.data
                p_gate = out.gate_prob.item()
                gate_lp = (_gate_logp(p_gate, 0), _gate_logp(p_gate, 1))
                for word in range(len(word_lp)):
                    for gate in (0, 1):
                        cum = hyp.logp + float(word_lp[word]) + gate_lp[gate]
                        candidates.append((cum, word, gate, hyp, state))
            candidates.sort(key=lambda c: (-c[0], c[1], c[2]))
            beam = []
            taken = 0
            # finished hypotheses consume a slot too, so width 1 stays greedy
            for cum, word, gate, hyp, state in candidates:
                if taken >= beam_size:
                    break
                taken += 1
                tokens = hyp.tokens + [word]
                gates = hyp.gates + [gate]
                if word == EOS_ID:
                    finished.append((cum / len(tokens), tokens, gates))
                else:
                    beam.append(_Hyp(tokens, gates, advance_pointer(state, gate, control), word, cum))
            if not beam:
                break
        for hyp in beam:  # ran into max_len without EOS
            finished.append((hyp.logp / len(hyp.tokens), hyp.tokens, hyp.gates))

    finished.sort(key=lambda f: -f[0])
    return [(tokens, gates, score) for score, tokens, gates in finished[:beam_size]]


def sequence_logprob(params: ModelParams, image_desc, control: ControlSignal, tokens, gates):
    """Replay a decoded action sequence under teacher forcing and return its
    total log-probability as a differentiable scalar (used by SCST)."""
    if len(tokens) != len(gates):
        raise UsageError("tokens and gates must have equal length")
    state = init_state(params)
    prev = BOS_ID
    total = None
    for word, gate in zip(tokens, gates):
        out, state = step(params, state, prev, current_set(control, state.pointer), image_desc)
        term = ad.pick(out.word_logprobs, word)
        p1 = ad.clip_min(out.gate_prob, _LOG_EPS)
        p0 = ad.clip_min(1.0 - out.gate_prob, _LOG_EPS)
        term = term + ad.log(p1 if gate else p0)
        total = term if total is None else total + term
        if word == EOS_ID:
            break
        state = advance_pointer(state, gate, control)
        prev = word
    if total is None:
        raise UsageError("cannot score an empty sequence")
    return total


def sequence_logprob_value(params, image_desc, control, tokens, gates) -> float:
    with ad.no_grad():
        return sequence_logprob(params, image_desc, control, tokens, gates).item()


def normalized_score(params, image_desc, control, tokens, gates) -> float:
    """Length-normalized action log-prob of a decode (greedy's ranking score)."""
    return sequence_logprob_value(params, image_desc, control, tokens, gates) / len(tokens)
