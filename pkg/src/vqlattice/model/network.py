"""Transducer network: encoder, prediction networks, quantizer and joint."""

from __future__ import annotations

import hashlib
import json
import math
import struct
from dataclasses import asdict, dataclass, replace
from pathlib import Path
from typing import NamedTuple, Optional

import numpy as np

from ..numerics import ContractError, DenseMap, SeededRng, dense_apply, log_softmax
from . import layers as L

BLANK = 0
START = 0  # prediction networks read id 0 as the start/pad token; blank is never an input
VARIANTS = ("lstm", "vq_lstm", "vlc")


class Vocabulary:
    """Label inventory. Index 0 is reserved for blank; labels are 1..len(symbols)."""

    def __init__(self, symbols):
        symbols = list(symbols)
        if len(set(symbols)) != len(symbols):
            raise ContractError("vocabulary symbols must be unique")
        if not symbols:
            raise ContractError("vocabulary must be non-empty")
        self.symbols = symbols
        self._index = {s: k + 1 for k, s in enumerate(symbols)}

    def __len__(self):
        return len(self.symbols)

    def __eq__(self, other):
        return isinstance(other, Vocabulary) and self.symbols == other.symbols

    @property
    def size_with_blank(self) -> int:
        return len(self.symbols) + 1

    def encode(self, seq) -> tuple:
        try:
            return tuple(self._index[s] for s in seq)
        except KeyError as exc:
            raise ContractError(f"unknown symbol {exc.args[0]!r}") from None

    def decode(self, ids) -> list:
        return [self.symbols[i - 1] for i in ids]

    def symbol(self, idx: int) -> str:
        return self.symbols[idx - 1]

    def checksum(self) -> str:
        return hashlib.sha256("\x1f".join(self.symbols).encode()).hexdigest()[:16]


@dataclass(frozen=True)
class ModelConfig:
    variant: str = "vq_lstm"
    num_labels: int = 8
    feat_dim: int = 16
    enc_dim: int = 64
    enc_layers: int = 2
    pred_dim: int = 32
    joint_dim: int = 64
    vq_groups: int = 2
    vq_vars: int = 8
    vq_depth: int = 1
    vlc_embed: int = 64
    joint_input: str = "pre_quant"  # or "quantized" (vq_lstm only)

    def __post_init__(self):
        if self.variant not in VARIANTS:
            raise ContractError(f"unknown variant {self.variant!r}")
        if self.enc_dim % 2:
            raise ContractError("enc_dim must be even (two directions)")
        if self.pred_dim % self.vq_groups:
            raise ContractError("pred_dim must be divisible by vq_groups")
        if min(self.vq_groups, self.vq_vars, self.vq_depth) < 1:
            raise ContractError("vq_groups, vq_vars and vq_depth must be >= 1")
        if self.joint_input not in ("quantized", "pre_quant"):
            raise ContractError(f"unknown joint_input {self.joint_input!r}")


PRESETS = {
    "baseline": ModelConfig(variant="lstm"),
    "vlc": ModelConfig(variant="vlc"),
    "vq": ModelConfig(variant="vq_lstm"),
    # full-size character-level configuration (not trained here)
    "full-vq": ModelConfig(
        variant="vq_lstm", num_labels=45, pred_dim=768, joint_dim=256, vq_groups=2, vq_vars=640, vq_depth=1
    ),
}


def preset(name: str, **overrides) -> ModelConfig:
    try:
        return replace(PRESETS[name], **overrides)
    except KeyError:
        raise ContractError(f"unknown preset {name!r}; choose from {sorted(PRESETS)}") from None


# ----------------------------------------------------------------------------
# component views over the parameter dict (no copies)


@dataclass
class LstmCell:
    embed: np.ndarray
    Wx: np.ndarray
    Wh: np.ndarray
    b: np.ndarray

    @property
    def state_dim(self) -> int:
        return self.Wh.shape[1]


@dataclass
class VectorQuantizer:
    layers: list  # DenseMaps, the last one producing groups * vars logits
    codebook: np.ndarray  # (groups, vars, dim / groups)

    @property
    def groups(self) -> int:
        return self.codebook.shape[0]

    @property
    def vars(self) -> int:
        return self.codebook.shape[1]


class StateQuantizer(NamedTuple):
    h: VectorQuantizer
    c: VectorQuantizer


class DiscreteCode(NamedTuple):
    h: tuple
    c: tuple


@dataclass
class VlcNet:
    embed: np.ndarray
    Wa: np.ndarray
    Wb: np.ndarray
    b: np.ndarray
    Sa: np.ndarray
    Sb: np.ndarray


@dataclass
class JointNetwork:
    enc: DenseMap
    pred: DenseMap
    out: DenseMap


@dataclass(frozen=True, eq=False)
class PredNetState:
    """Prediction-network state carried by a search hypothesis.

    ``h``/``c`` are the recurrent vectors (codebook reconstructions for
    vq_lstm), ``code`` the discrete code (vq_lstm only) and ``context`` the
    last two label ids (vlc only, start-padded).
    """

    variant: str
    h: Optional[np.ndarray] = None
    c: Optional[np.ndarray] = None
    code: Optional[DiscreteCode] = None
    context: tuple = ()


def lstm_step(cell: LstmCell, y_prev: int, state):
    if not 0 <= y_prev < cell.embed.shape[0]:
        raise ContractError(f"invalid label id {y_prev}")
    h, c = state
    x = np.zeros(cell.embed.shape[1]) if y_prev == START else cell.embed[y_prev]
    h2, c2, _ = L.lstm_cell(cell.Wx, cell.Wh, cell.b, x, np.asarray(h, float), np.asarray(c, float))
    return h2, (h2, c2)


def _vq_layers(q: VectorQuantizer):
    return [(m.weight, m.bias) for m in q.layers]


def vq_quantize(q: StateQuantizer, h_raw, c_raw, mode: str = "infer", rng=None, temperature: float = 1.0):
    """Quantize an (h, c) pair; returns ``(DiscreteCode, h_q, c_q)``.

    ``mode='train'`` uses the Gumbel-softmax selection (noise from ``rng``);
    ``mode='infer'`` is the deterministic argmax.
    """
    inner = "hard" if mode == "train" else "infer"
    if mode not in ("train", "infer"):
        raise ContractError(f"unknown quantizer mode {mode!r}")
    for part, v in (("h", h_raw), ("c", c_raw)):
        qq = getattr(q, part)
        if len(v) != qq.layers[0].in_dim or qq.groups * qq.codebook.shape[2] != len(v):
            raise ContractError(f"{part} dimension {len(v)} does not match quantizer")
    hq, dh, _ = L.vq_forward(_vq_layers(q.h), q.h.codebook, np.asarray(h_raw, float), inner, rng, temperature)
    cq, dc, _ = L.vq_forward(_vq_layers(q.c), q.c.codebook, np.asarray(c_raw, float), inner, rng, temperature)
    return DiscreteCode(dh, dc), hq, cq


def vq_lstm_step(cell: LstmCell, q: StateQuantizer, y_prev: int, state: PredNetState, joint_input="quantized"):
    g_pre, (h_raw, c_raw) = lstm_step(cell, y_prev, (state.h, state.c))
    code, hq, cq = vq_quantize(q, h_raw, c_raw)
    g = hq if joint_input == "quantized" else g_pre
    return g, PredNetState("vq_lstm", hq, cq, code)


def vlc_step(net: VlcNet, last_two_labels) -> np.ndarray:
    prev, cur = (tuple([START, START]) + tuple(last_two_labels))[-2:]
    g, _ = L.vlc_forward(net.embed, net.Wa, net.Wb, net.b, net.Sa, net.Sb, np.array([prev]), np.array([cur]))
    return g[0]


def joint(jn: JointNetwork, m_t, g_u) -> np.ndarray:
    z = np.tanh(dense_apply(jn.enc, m_t) * dense_apply(jn.pred, g_u))
    return log_softmax(dense_apply(jn.out, z))


def _quantize_rows(q: VectorQuantizer, X):
    """Argmax quantization of each row of ``X``; returns (reconstructions, codes)."""
    a = X
    for k, m in enumerate(q.layers):
        a = a @ m.weight.T + m.bias
        if k < len(q.layers) - 1:
            a = np.tanh(a)
    G, V, d = q.codebook.shape
    idx = np.argmax(a.reshape(len(X), G, V), axis=2)
    recon = q.codebook[np.arange(G)[None, :], idx].reshape(len(X), G * d)
    return recon, idx.tolist()


def encode(model: "Transducer", features) -> np.ndarray:
    m, _ = model.encode(features)
    return m


# ----------------------------------------------------------------------------


class Tape(NamedTuple):
    """Forward caches for a batch of utterances (one entry per utterance)."""

    enc_caches: tuple
    pred_cache: list
    joint_cache: list
    labels: list


class Transducer:
    def __init__(self, config: ModelConfig, vocab: Vocabulary, params: dict):
        if len(vocab) != config.num_labels:
            raise ContractError("vocabulary size does not match config.num_labels")
        self.config = config
        self.vocab = vocab
        self.params = params

    # -- construction -------------------------------------------------------

    @classmethod
    def init(cls, config: ModelConfig, vocab: Vocabulary, seed: int = 0) -> "Transducer":
        rng = SeededRng(seed).derive("init")
        cfg = config
        p = {}

        def uni(shape, fan_in):
            s = 1.0 / math.sqrt(fan_in)
            return rng.uniform(-s, s, shape)

        def lstm(prefix, n_in, D):
            p[prefix + "Wx"] = uni((4 * D, n_in), n_in + D)
            p[prefix + "Wh"] = uni((4 * D, D), n_in + D)
            b = np.zeros(4 * D)
            b[D : 2 * D] = 1.0
            p[prefix + "b"] = b

        n_in = cfg.feat_dim
        H = cfg.enc_dim // 2
        for k in range(cfg.enc_layers):
            lstm(f"enc.{k}.fw.", n_in, H)
            lstm(f"enc.{k}.bw.", n_in, H)
            n_in = cfg.enc_dim
        D = cfg.pred_dim
        K = cfg.num_labels + 1
        if cfg.variant in ("lstm", "vq_lstm"):
            p["pred.embed"] = rng.normal(0.0, 0.5, (K, D))
            p["pred.embed"][START] = 0.0
            lstm("pred.", D, D)
        if cfg.variant == "vq_lstm":
            for part in ("h", "c"):
                for k in range(cfg.vq_depth):
                    out = cfg.vq_groups * cfg.vq_vars if k == cfg.vq_depth - 1 else D
                    p[f"vq.{part}.{k}.W"] = uni((out, D), D)
                    p[f"vq.{part}.{k}.b"] = np.zeros(out)
                p[f"vq.{part}.codebook"] = rng.uniform(-1.0, 1.0, (cfg.vq_groups, cfg.vq_vars, D // cfg.vq_groups))
        if cfg.variant == "vlc":
            E = cfg.vlc_embed
            p["vlc.embed"] = rng.normal(0.0, 0.5, (K, E))
            for name in ("Wa", "Wb", "Sa", "Sb"):
                p["vlc." + name] = uni((D, E), 2 * E)
            p["vlc.b"] = np.zeros(D)
        J = cfg.joint_dim
        p["joint.enc.W"] = uni((J, cfg.enc_dim), cfg.enc_dim)
        p["joint.enc.b"] = np.zeros(J)
        p["joint.pred.W"] = uni((J, D), D)
        p["joint.pred.b"] = np.ones(J)
        p["joint.out.W"] = uni((K, J), J)
        p["joint.out.b"] = np.zeros(K)
        return cls(config, vocab, p)

    def copy(self) -> "Transducer":
        return Transducer(self.config, self.vocab, {k: v.copy() for k, v in self.params.items()})

    # -- component views ----------------------------------------------------

    @property
    def lstm_cell(self) -> LstmCell:
        p = self.params
        return LstmCell(p["pred.embed"], p["pred.Wx"], p["pred.Wh"], p["pred.b"])

    @property
    def quantizer(self) -> StateQuantizer:
        p = self.params

        def one(part):
            stack = [
                DenseMap(p[f"vq.{part}.{k}.W"], p[f"vq.{part}.{k}.b"]) for k in range(self.config.vq_depth)
            ]
            return VectorQuantizer(stack, p[f"vq.{part}.codebook"])

        return StateQuantizer(one("h"), one("c"))

    @property
    def vlc_net(self) -> VlcNet:
        p = self.params
        return VlcNet(p["vlc.embed"], p["vlc.Wa"], p["vlc.Wb"], p["vlc.b"], p["vlc.Sa"], p["vlc.Sb"])

    @property
    def joint_network(self) -> JointNetwork:
        p = self.params
        return JointNetwork(
            DenseMap(p["joint.enc.W"], p["joint.enc.b"]),
            DenseMap(p["joint.pred.W"], p["joint.pred.b"]),
            DenseMap(p["joint.out.W"], p["joint.out.b"]),
        )

    def _vq_stack(self, part):
        p = self.params
        return [(p[f"vq.{part}.{k}.W"], p[f"vq.{part}.{k}.b"]) for k in range(self.config.vq_depth)]

    # -- encoder ------------------------------------------------------------

    def encode(self, features):
        m, caches = self.encode_batch([features])
        return m[0], caches

    def encode_batch(self, feature_list):
        """Encode several utterances in one padded scan.

        Forward streams are padded at the end and backward streams are
        reversed before padding, so padding never leaks into valid frames.
        Returns the per-utterance encodings and a cache for the backward pass.
        """
        xs = []
        for f in feature_list:
            x = np.asarray(f, dtype=np.float64)
            if x.ndim != 2 or x.shape[0] == 0:
                raise ContractError("encoder input must be a non-empty T x F matrix")
            if x.shape[1] != self.config.feat_dim:
                raise ContractError(f"feature dim {x.shape[1]} != {self.config.feat_dim}")
            xs.append(x)
        lengths = [x.shape[0] for x in xs]
        Tm = max(lengths)
        caches = []
        for k in range(self.config.enc_layers):
            Wx, Wh, b = self._bi_weights(k)
            padded = np.zeros((2, len(xs), Tm, xs[0].shape[1]))
            for j, x in enumerate(xs):
                padded[0, j, : lengths[j]] = x
                padded[1, j, : lengths[j]] = x[::-1]
            hs, cache = L.lstm_scan(Wx, Wh, b, padded)
            caches.append(cache)
            xs = [
                np.concatenate([hs[0, j, :T], hs[1, j, :T][::-1]], axis=1)
                for j, T in enumerate(lengths)
            ]
        return xs, (lengths, caches)

    def _bi_weights(self, k):
        p = self.params
        fw, bw = f"enc.{k}.fw.", f"enc.{k}.bw."
        Wx, Wh, b = (np.stack([p[fw + n], p[bw + n]])[:, None] for n in ("Wx", "Wh", "b"))
        return Wx, Wh, b

    def _encode_backward(self, enc_cache, dms, grads):
        lengths, caches = enc_cache
        H = self.config.enc_dim // 2
        Tm = max(lengths)
        for k in range(self.config.enc_layers - 1, -1, -1):
            Wx, Wh, b = self._bi_weights(k)
            dhs = np.zeros((2, len(lengths), Tm, H))
            for j, T in enumerate(lengths):
                dhs[0, j, :T] = dms[j][:, :H]
                dhs[1, j, :T] = dms[j][::-1, H:]
            dxs, dWx, dWh, db = L.lstm_scan_backward(Wx, Wh, b, caches[k], dhs)
            for s, d in enumerate(("fw", "bw")):
                grads[f"enc.{k}.{d}.Wx"] += dWx[s, 0]
                grads[f"enc.{k}.{d}.Wh"] += dWh[s, 0]
                grads[f"enc.{k}.{d}.b"] += db[s, 0]
            dms = [dxs[0, j, :T] + dxs[1, j, :T][::-1] for j, T in enumerate(lengths)]

    # -- prediction network: inference steps ----------------------------------

    def initial_state(self):
        """Return ``(state, g0)`` for the empty label prefix."""
        cfg = self.config
        D = cfg.pred_dim
        zero = np.zeros(D)
        if cfg.variant == "lstm":
            return PredNetState("lstm", zero, zero), zero
        if cfg.variant == "vlc":
            return PredNetState("vlc", context=(START, START)), vlc_step(self.vlc_net, ())
        code, hq, cq = vq_quantize(self.quantizer, zero, zero)
        g = hq if cfg.joint_input == "quantized" else zero
        return PredNetState("vq_lstm", hq, cq, code), g

    def step(self, state: PredNetState, label: int):
        """Advance the prediction network by one emitted label; returns ``(state, g)``."""
        if not 1 <= label <= self.config.num_labels:
            raise ContractError(f"invalid label id {label}")
        if state.variant == "lstm":
            g, (h, c) = lstm_step(self.lstm_cell, label, (state.h, state.c))
            return PredNetState("lstm", h, c), g
        if state.variant == "vlc":
            ctx = (state.context[-1], label)
            return PredNetState("vlc", context=ctx), vlc_step(self.vlc_net, ctx)
        g, new = vq_lstm_step(self.lstm_cell, self.quantizer, label, state, self.config.joint_input)
        return new, g

    def step_all(self, state: PredNetState):
        """Advance ``state`` by every label at once.

        Returns ``(states, G)`` where ``states[k - 1]`` and ``G[k - 1]`` belong
        to label ``k``. Matches :meth:`step` row by row; the decoder uses it to
        expand a hypothesis over the whole vocabulary in one pass.
        """
        cfg = self.config
        p = self.params
        labels = range(1, cfg.num_labels + 1)
        if state.variant == "vlc":
            prev = np.full(cfg.num_labels, state.context[-1])
            G, _ = L.vlc_forward(
                p["vlc.embed"], p["vlc.Wa"], p["vlc.Wb"], p["vlc.b"], p["vlc.Sa"], p["vlc.Sb"],
                prev, np.arange(1, cfg.num_labels + 1),
            )
            return [PredNetState("vlc", context=(state.context[-1], k)) for k in labels], G
        D = cfg.pred_dim
        Z = p["pred.embed"][1:] @ p["pred.Wx"].T + (p["pred.Wh"] @ state.h + p["pred.b"])
        gates = 0.5 * (1.0 + np.tanh(0.5 * Z[:, : 3 * D]))
        C = gates[:, D : 2 * D] * state.c + gates[:, :D] * np.tanh(Z[:, 3 * D :])
        H = gates[:, 2 * D :] * np.tanh(C)
        if state.variant == "lstm":
            return [PredNetState("lstm", H[j], C[j]) for j in range(len(H))], H
        hq, hidx = _quantize_rows(self.quantizer.h, H)
        cq, cidx = _quantize_rows(self.quantizer.c, C)
        states = [
            PredNetState("vq_lstm", hq[j], cq[j], DiscreteCode(tuple(hidx[j]), tuple(cidx[j])))
            for j in range(len(H))
        ]
        return states, (hq if cfg.joint_input == "quantized" else H)

    def prediction_outputs(self, labels):
        """Inference-mode g_0..g_U for a label sequence."""
        state, g = self.initial_state()
        out = [g]
        for y in labels:
            state, g = self.step(state, y)
            out.append(g)
        return np.stack(out)

    def enc_projection(self, m):
        return m @ self.params["joint.enc.W"].T + self.params["joint.enc.b"]

    def pred_projection(self, g):
        return g @ self.params["joint.pred.W"].T + self.params["joint.pred.b"]

    def joint_from_projections(self, e, pg):
        z = np.tanh(e * pg)
        return log_softmax(z @ self.params["joint.out.W"].T + self.params["joint.out.b"])

    # -- full-sequence training path ------------------------------------------

    def _predict_sequence(self, labels, mode, rng, temperature):
        cfg = self.config
        p = self.params
        U = len(labels)
        D = cfg.pred_dim
        ids = np.asarray(labels, dtype=int)
        if U and (ids.min() < 1 or ids.max() > cfg.num_labels):
            raise ContractError("label ids out of range")
        if cfg.variant == "lstm":
            G = np.zeros((U + 1, D))
            cache = None
            if U:
                hs, cache = L.lstm_scan(
                    p["pred.Wx"][None], p["pred.Wh"][None], p["pred.b"][None], p["pred.embed"][ids][None]
                )
                G[1:] = hs[0]
            return G, ("lstm", ids, cache)
        if cfg.variant == "vlc":
            ctx = np.concatenate([[START, START], ids])
            G, cache = L.vlc_forward(
                p["vlc.embed"], p["vlc.Wa"], p["vlc.Wb"], p["vlc.b"], p["vlc.Sa"], p["vlc.Sb"], ctx[:-1], ctx[1:]
            )
            return G, ("vlc", ctx, cache)
        # vq_lstm
        vq_mode = mode if mode in ("soft", "hard") else "infer"
        hstack, cstack = self._vq_stack("h"), self._vq_stack("c")
        hcb, ccb = p["vq.h.codebook"], p["vq.c.codebook"]
        zero = np.zeros(D)
        hq, _, qh = L.vq_forward(hstack, hcb, zero, vq_mode, rng, temperature)
        cq, _, qc = L.vq_forward(cstack, ccb, zero, vq_mode, rng, temperature)
        G = np.zeros((U + 1, D))
        quantized = cfg.joint_input == "quantized"
        G[0] = hq if quantized else zero
        steps = [(None, qh, qc)]
        for u in range(U):
            h_raw, c_raw, lc = L.lstm_cell(p["pred.Wx"], p["pred.Wh"], p["pred.b"], p["pred.embed"][ids[u]], hq, cq)
            hq, _, qh = L.vq_forward(hstack, hcb, h_raw, vq_mode, rng, temperature)
            cq, _, qc = L.vq_forward(cstack, ccb, c_raw, vq_mode, rng, temperature)
            G[u + 1] = hq if quantized else h_raw
            steps.append((lc, qh, qc))
        return G, ("vq_lstm", ids, steps)

    def _predict_backward(self, cache, dG, grads):
        p = self.params
        kind, ids, inner = cache
        if kind == "lstm":
            if inner is not None:
                dxs, dWx, dWh, db = L.lstm_scan_backward(
                    p["pred.Wx"][None], p["pred.Wh"][None], p["pred.b"][None], inner, dG[1:][None]
                )
                grads["pred.Wx"] += dWx[0]
                grads["pred.Wh"] += dWh[0]
                grads["pred.b"] += db[0]
                np.add.at(grads["pred.embed"], ids, dxs[0])
            return
        if kind == "vlc":
            dep, dec = L.vlc_backward(p["vlc.Wa"], p["vlc.Wb"], p["vlc.Sa"], p["vlc.Sb"], inner, dG, grads)
            np.add.at(grads["vlc.embed"], ids[:-1], dep)
            np.add.at(grads["vlc.embed"], ids[1:], dec)
            return
        if inner[0][1] is None:
            raise ContractError("vq backward requires a soft or hard forward pass")
        hstack, cstack = self._vq_stack("h"), self._vq_stack("c")
        hcb, ccb = p["vq.h.codebook"], p["vq.c.codebook"]
        quantized = self.config.joint_input == "quantized"
        D = self.config.pred_dim
        dh_carry = np.zeros(D)
        dc_carry = np.zeros(D)
        for u in range(len(inner) - 1, -1, -1):
            lc, qh, qc = inner[u]
            dhq = dh_carry + (dG[u] if quantized else 0.0)
            dh_raw = L.vq_backward(hstack, hcb, qh, dhq, grads, "vq.h.")
            dc_raw = L.vq_backward(cstack, ccb, qc, dc_carry, grads, "vq.c.")
            if lc is None:
                break
            if not quantized:
                dh_raw = dh_raw + dG[u]
            dx, dh_carry, dc_carry = L.lstm_cell_backward(p["pred.Wx"], p["pred.Wh"], lc, dh_raw, dc_raw, grads, "pred.")
            grads["pred.embed"][ids[u - 1]] += dx

    def forward(self, features, labels, mode="infer", rng=None, temperature=1.0):
        """Compute the T x (U+1) x (|Y|+1) log-probability grid.

        ``mode`` selects quantizer behaviour for vq_lstm (``infer``, ``soft``
        or ``hard``); other variants ignore it.
        """
        grids, tape = self.forward_batch([features], [labels], mode, [rng], temperature)
        return grids[0], tape

    def forward_batch(self, feature_list, label_list, mode="infer", rngs=None, temperature=1.0):
        """Batched :meth:`forward`; one grid per utterance plus a shared tape."""
        if len(feature_list) != len(label_list):
            raise ContractError("features and labels must pair up")
        rngs = rngs if rngs is not None else [None] * len(label_list)
        ms, enc_cache = self.encode_batch(feature_list)
        p = self.params
        grids, preds, joints = [], [], []
        for m, labels, rng in zip(ms, label_list, rngs):
            G, pred_cache = self._predict_sequence(tuple(labels), mode, rng, temperature)
            grid, jc = L.joint_grid(
                p["joint.enc.W"], p["joint.enc.b"], p["joint.pred.W"], p["joint.pred.b"],
                p["joint.out.W"], p["joint.out.b"], m, G,
            )
            grids.append(grid)
            preds.append(pred_cache)
            joints.append(jc)
        return grids, Tape(enc_cache, preds, joints, [tuple(y) for y in label_list])

    def backward(self, tape: Tape, dgrids) -> dict:
        """Parameter gradients given d(objective)/d(grid) for each utterance.

        Accepts a single grid gradient for a tape from :meth:`forward`.
        """
        if isinstance(dgrids, np.ndarray):
            dgrids = [dgrids]
        grads = {k: np.zeros_like(v) for k, v in self.params.items()}
        p = self.params
        dms = []
        for pred_cache, jc, dgrid in zip(tape.pred_cache, tape.joint_cache, dgrids):
            dm, dG = L.joint_grid_backward(p["joint.enc.W"], p["joint.pred.W"], p["joint.out.W"], jc, dgrid, grads)
            self._predict_backward(pred_cache, dG, grads)
            dms.append(dm)
        self._encode_backward(tape.enc_caches, dms, grads)
        if "pred.embed" in grads:
            grads["pred.embed"][START] = 0.0
        return grads

    def log_prob_grid(self, features, labels):
        return self.forward(features, labels)[0]

    # -- persistence -----------------------------------------------------------

    def save(self, path) -> None:
        Path(path).write_bytes(checkpoint_bytes(self))

    @classmethod
    def load(cls, path) -> "Transducer":
        return checkpoint_from_bytes(Path(path).read_bytes())


_MAGIC = b"VQTCKPT"
_VERSION = 1


def checkpoint_bytes(model: Transducer, extra: Optional[dict] = None) -> bytes:
    """Serialize to a deterministic container: magic, version, JSON header, raw float64 LE."""
    names = sorted(model.params)
    index = []
    blobs = []
    offset = 0
    for name in names:
        arr = np.ascontiguousarray(model.params[name], dtype="<f8")
        index.append({"name": name, "shape": list(arr.shape), "offset": offset})
        blobs.append(arr.tobytes())
        offset += arr.nbytes
    header = {
        "config": asdict(model.config),
        "vocab": model.vocab.symbols,
        "params": index,
        "extra": extra or {},
    }
    hb = json.dumps(header, sort_keys=True, separators=(",", ":")).encode()
    return _MAGIC + struct.pack("<II", _VERSION, len(hb)) + hb + b"".join(blobs)


def checkpoint_from_bytes(data: bytes) -> Transducer:
    if not data.startswith(_MAGIC):
        raise ContractError("not a checkpoint file")
    version, hlen = struct.unpack_from("<II", data, len(_MAGIC))
    if version != _VERSION:
        raise ContractError(f"unsupported checkpoint version {version}")
    start = len(_MAGIC) + 8
    header = json.loads(data[start : start + hlen])
    body = memoryview(data)[start + hlen :]
    params = {}
    for entry in header["params"]:
        n = int(np.prod(entry["shape"], dtype=np.int64))
        arr = np.frombuffer(body, dtype="<f8", count=n, offset=entry["offset"])
        params[entry["name"]] = arr.reshape(entry["shape"]).astype(np.float64)
    return Transducer(ModelConfig(**header["config"]), Vocabulary(header["vocab"]), params)


def checkpoint_extra(data: bytes) -> dict:
    version, hlen = struct.unpack_from("<II", data, len(_MAGIC))
    start = len(_MAGIC) + 8
    return json.loads(data[start : start + hlen])["extra"]


__all__ = [
    "BLANK",
    "START",
    "DiscreteCode",
    "JointNetwork",
    "LstmCell",
    "ModelConfig",
    "PredNetState",
    "StateQuantizer",
    "Transducer",
    "VectorQuantizer",
    "VlcNet",
    "Vocabulary",
    "checkpoint_bytes",
    "checkpoint_from_bytes",
    "encode",
    "joint",
    "lstm_step",
    "preset",
    "vlc_step",
    "vq_lstm_step",
    "vq_quantize",
]
