"""The acoustic model: phonetic encoder, transformer backbone, GRU
reference encoder, regularized prenet, autoregressive decoder, postnet and
stop predictor.

Phoneme embeddings are diagonal Gaussians: training samples via the
reparameterization trick, inference uses the mean. Positional encodings
are added through a learnable scalar weight followed by layer norm, on
both the encoder and the decoder side. The prenet keeps its strong
dropout active at inference time.

Teacher-forced decoding builds a differentiable graph over whole
sequences; free-running synthesis uses an incremental numpy path
(``DecoderState``) over the same parameters, with per-layer key/value
caching.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autograd as ag
from .autograd import Tensor


class ConfigError(ValueError):
    pass


@dataclass
class ModelConfig:
    n_phonemes: int = 64
    d_model: int = 64
    n_heads: int = 2
    n_encoder_layers: int = 2
    n_decoder_layers: int = 2
    d_ff: int = 128
    feature_dim: int = 16
    prenet_hidden: int = 32
    prenet_bottleneck: int = 8
    postnet_layers: int = 5
    postnet_width: int = 32
    postnet_kernel: int = 5
    ref_frames: int = 16
    ref_width: int = 32
    dropout_prenet: float = 0.6
    max_decode_frames: int = 800
    max_seq_len: int = 2048
    logvar_init: float = -4.0
    precision: str = "f32"

    def __post_init__(self):
        if self.d_model % self.n_heads != 0:
            raise ConfigError("d_model must be divisible by n_heads")
        if not 0.0 <= self.dropout_prenet < 1.0:
            raise ConfigError("dropout_prenet must be in [0, 1)")
        if self.prenet_bottleneck >= self.feature_dim:
            raise ConfigError("prenet bottleneck must be narrower than the "
                              "feature dim")
        if self.postnet_kernel % 2 == 0:
            raise ConfigError("postnet kernel width must be odd")
        for name in ("n_phonemes", "d_model", "n_heads", "n_encoder_layers",
                     "n_decoder_layers", "d_ff", "feature_dim",
                     "prenet_hidden", "prenet_bottleneck", "postnet_layers",
                     "postnet_width", "ref_frames", "ref_width",
                     "max_decode_frames", "max_seq_len"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be positive")

    @property
    def dtype(self):
        return np.float64 if self.precision == "f64" else np.float32


def sinusoid_table(length: int, d: int, dtype=np.float32) -> np.ndarray:
    pos = np.arange(length)[:, None]
    i = np.arange(d)[None, :]
    angle = pos / np.power(10000.0, (2 * (i // 2)) / d)
    table = np.where(i % 2 == 0, np.sin(angle), np.cos(angle))
    return table.astype(dtype)


def parameter_count(cfg: ModelConfig) -> int:
    """Total learnable scalar count, a pure function of the config."""
    d, ff, dim = cfg.d_model, cfg.d_ff, cfg.feature_dim
    attn = 4 * (d * d + d)
    ln = 2 * d
    enc_layer = attn + 2 * ln + (d * ff + ff) + (ff * d + d)
    dec_layer = 2 * attn + 3 * ln + (d * ff + ff) + (ff * d + d)
    total = 2 * cfg.n_phonemes * d                      # gaussian mu, logvar
    total += 2 * (1 + ln)                               # enc/dec alpha + pos LN
    total += cfg.n_encoder_layers * enc_layer
    total += cfg.n_decoder_layers * dec_layer
    h, b = cfg.prenet_hidden, cfg.prenet_bottleneck
    total += dim * h + h + h * b + b                    # prenet
    total += b * d + d                                  # decoder input proj
    total += 3 * (cfg.feature_dim * cfg.ref_width
                  + cfg.ref_width * cfg.ref_width + cfg.ref_width)  # ref GRU
    total += cfg.ref_width * d + d                      # ref projection
    total += d * dim + dim                              # pre-mel projection
    total += d + 1                                      # stop head
    w = cfg.postnet_width
    k = cfg.postnet_kernel
    if cfg.postnet_layers == 1:
        total += k * dim * dim + dim
    else:
        total += k * dim * w + w
        total += (cfg.postnet_layers - 2) * (k * w * w + w)
        total += k * w * dim + dim
    return total


class StutterTTS:
    """Parameter container plus forward passes."""

    def __init__(self, cfg: ModelConfig, seed: int = 0):
        self.cfg = cfg
        self.params: dict[str, Tensor] = {}
        self._init_params(np.random.default_rng([seed, 0]))
        self._pe = sinusoid_table(cfg.max_seq_len, cfg.d_model, cfg.dtype)

    # -- parameter setup ----------------------------------------------------

    def _add(self, name, array):
        self.params[name] = Tensor(array.astype(self.cfg.dtype),
                                   requires_grad=True)

    def _linear(self, name, fan_in, fan_out, rng, zero=False):
        if zero:
            w = np.zeros((fan_in, fan_out))
        else:
            w = rng.normal(scale=1.0 / np.sqrt(fan_in),
                           size=(fan_in, fan_out))
        self._add(f"{name}.w", w)
        self._add(f"{name}.b", np.zeros((1, fan_out)))

    def _ln(self, name, d):
        self._add(f"{name}.gain", np.ones(d))
        self._add(f"{name}.bias", np.zeros(d))

    def _attn(self, name, rng):
        d = self.cfg.d_model
        for part in ("q", "k", "v", "o"):
            self._linear(f"{name}.{part}", d, d, rng)

    def _init_params(self, rng):
        cfg = self.cfg
        d = cfg.d_model
        self._add("embed.mu", rng.normal(scale=0.5, size=(cfg.n_phonemes, d)))
        self._add("embed.logvar",
                  np.full((cfg.n_phonemes, d), cfg.logvar_init))
        for side in ("enc", "dec"):
            self._add(f"{side}.pos.alpha", np.asarray(1.0))
            self._ln(f"{side}.pos.ln", d)
        for i in range(cfg.n_encoder_layers):
            self._attn(f"enc.{i}.attn", rng)
            self._ln(f"enc.{i}.ln1", d)
            self._linear(f"enc.{i}.ff1", d, cfg.d_ff, rng)
            self._linear(f"enc.{i}.ff2", cfg.d_ff, d, rng)
            self._ln(f"enc.{i}.ln2", d)
        self._linear("prenet.l1", cfg.feature_dim, cfg.prenet_hidden, rng)
        self._linear("prenet.l2", cfg.prenet_hidden, cfg.prenet_bottleneck, rng)
        self._linear("dec.in", cfg.prenet_bottleneck, d, rng)
        for gate in ("z", "r", "n"):
            self._add(f"ref.gru.w_{gate}",
                      rng.normal(scale=1.0 / np.sqrt(cfg.feature_dim),
                                 size=(cfg.feature_dim, cfg.ref_width)))
            self._add(f"ref.gru.u_{gate}",
                      rng.normal(scale=1.0 / np.sqrt(cfg.ref_width),
                                 size=(cfg.ref_width, cfg.ref_width)))
            self._add(f"ref.gru.b_{gate}", np.zeros((1, cfg.ref_width)))
        self._linear("ref.proj", cfg.ref_width, d, rng)
        for i in range(cfg.n_decoder_layers):
            self._attn(f"dec.{i}.self", rng)
            self._ln(f"dec.{i}.ln1", d)
            self._attn(f"dec.{i}.cross", rng)
            self._ln(f"dec.{i}.ln2", d)
            self._linear(f"dec.{i}.ff1", d, cfg.d_ff, rng)
            self._linear(f"dec.{i}.ff2", cfg.d_ff, d, rng)
            self._ln(f"dec.{i}.ln3", d)
        self._linear("out", d, cfg.feature_dim, rng)
        self._linear("stop", d, 1, rng)
        self.params["stop.b"].data[:] = -2.0
        widths = [cfg.feature_dim] + [cfg.postnet_width] * (cfg.postnet_layers - 1) \
            + [cfg.feature_dim]
        for i in range(cfg.postnet_layers):
            c_in, c_out = widths[i], widths[i + 1]
            last = i == cfg.postnet_layers - 1
            if last:
                k = np.zeros((cfg.postnet_kernel, c_in, c_out))
            else:
                k = rng.normal(scale=1.0 / np.sqrt(cfg.postnet_kernel * c_in),
                               size=(cfg.postnet_kernel, c_in, c_out))
            self._add(f"post.{i}.k", k)
            self._add(f"post.{i}.b", np.zeros((1, c_out)))

    def n_parameters(self):
        return sum(p.data.size for p in self.params.values())

    def clone(self) -> "StutterTTS":
        other = StutterTTS.__new__(StutterTTS)
        other.cfg = self.cfg
        other.params = {k: Tensor(v.data.copy(), requires_grad=True)
                        for k, v in self.params.items()}
        other._pe = self._pe
        return other

    # -- shared building blocks ---------------------------------------------

    def _p(self, name):
        return self.params[name]

    def _affine(self, x, name):
        return ag.add(ag.matmul(x, self._p(f"{name}.w")), self._p(f"{name}.b"))

    def _layer_norm(self, x, name):
        return ag.layer_norm(x, self._p(f"{name}.gain"),
                             self._p(f"{name}.bias"), eps=1e-5)

    def _mha(self, q_in, kv_in, name, mask=None):
        cfg = self.cfg
        dk = cfg.d_model // cfg.n_heads
        q = self._affine(q_in, f"{name}.q")
        k = self._affine(kv_in, f"{name}.k")
        v = self._affine(kv_in, f"{name}.v")
        heads = []
        for h in range(cfg.n_heads):
            lo, hi = h * dk, (h + 1) * dk
            qh = ag.slice_cols(q, lo, hi)
            kh = ag.slice_cols(k, lo, hi)
            vh = ag.slice_cols(v, lo, hi)
            scores = ag.scale(ag.matmul(qh, ag.transpose(kh)),
                              1.0 / np.sqrt(dk))
            if mask is not None:
                scores = ag.add(scores, mask)
            heads.append(ag.matmul(ag.softmax_lastdim(scores), vh))
        return self._affine(ag.concat_cols(heads), f"{name}.o")

    def _ff(self, x, prefix):
        return self._affine(ag.relu(self._affine(x, f"{prefix}.ff1")),
                            f"{prefix}.ff2")

    def positional_encode(self, x: Tensor, side: str) -> Tensor:
        length = x.data.shape[0]
        if length > self._pe.shape[0]:
            raise ConfigError(
                f"sequence length {length} exceeds positional table "
                f"{self._pe.shape[0]}")
        pe = ag.constant(self._pe[:length])
        weighted = ag.mul(pe, self._p(f"{side}.pos.alpha"))
        return self._layer_norm(ag.add(x, weighted), f"{side}.pos.ln")

    # -- encoder ------------------------------------------------------------

    def embed_phonemes(self, ids, mode: str, rng=None) -> Tensor:
        mu = ag.gather_rows(self._p("embed.mu"), ids)
        if mode == "infer":
            return mu
        logvar = ag.gather_rows(self._p("embed.logvar"), ids)
        std = ag.exp(ag.scale(logvar, 0.5))
        eps = ag.constant(rng.normal(size=mu.data.shape).astype(self.cfg.dtype))
        return ag.add(mu, ag.mul(std, eps))

    def encode(self, ids, mode: str = "infer", rng=None) -> Tensor:
        if len(ids) == 0:
            raise ConfigError("cannot encode an empty phoneme sequence")
        x = self.positional_encode(self.embed_phonemes(ids, mode, rng), "enc")
        for i in range(self.cfg.n_encoder_layers):
            x = self._layer_norm(ag.add(x, self._mha(x, x, f"enc.{i}.attn")),
                                 f"enc.{i}.ln1")
            x = self._layer_norm(ag.add(x, self._ff(x, f"enc.{i}")),
                                 f"enc.{i}.ln2")
        return x

    # -- reference encoder --------------------------------------------------

    def _gru_weights(self):
        p = self._p
        return ag.GRUWeights(p("ref.gru.w_z"), p("ref.gru.u_z"), p("ref.gru.b_z"),
                             p("ref.gru.w_r"), p("ref.gru.u_r"), p("ref.gru.b_r"),
                             p("ref.gru.w_n"), p("ref.gru.u_n"), p("ref.gru.b_n"))

    def reference_embed(self, ref_frames: np.ndarray, rng) -> Tensor:
        """GRU over K randomly drawn reference frames (sorted by time);
        returns the final hidden state, 1 x ref_width."""
        t = ref_frames.shape[0]
        if t < 1:
            raise ag.ParameterError("reference needs at least one frame")
        idx = np.sort(rng.integers(0, t, size=self.cfg.ref_frames))
        w = self._gru_weights()
        h = ag.constant(np.zeros((1, self.cfg.ref_width), dtype=self.cfg.dtype))
        for i in idx:
            x = ag.constant(ref_frames[i:i + 1].astype(self.cfg.dtype))
            h = ag.gru_cell(x, h, w)
        return h

    # -- decoder ------------------------------------------------------------

    def prenet(self, frames: Tensor, rng, dropout_active: bool = True) -> Tensor:
        """Bottleneck projection with strong dropout, live in every mode."""
        p = self.cfg.dropout_prenet
        h = ag.relu(self._affine(frames, "prenet.l1"))
        h = ag.dropout(h, p, dropout_active, rng)
        h = ag.relu(self._affine(h, "prenet.l2"))
        return ag.dropout(h, p, dropout_active, rng)

    def _decoder_input(self, frames: Tensor, ref_emb: Tensor, rng,
                       dropout_active: bool) -> Tensor:
        x = self._affine(self.prenet(frames, rng, dropout_active), "dec.in")
        ref_add = self._affine(ref_emb, "ref.proj")
        return self.positional_encode(ag.add(x, ref_add), "dec")

    def _decoder_stack(self, x: Tensor, enc_out: Tensor, causal_mask) -> Tensor:
        for i in range(self.cfg.n_decoder_layers):
            x = self._layer_norm(
                ag.add(x, self._mha(x, x, f"dec.{i}.self", causal_mask)),
                f"dec.{i}.ln1")
            x = self._layer_norm(
                ag.add(x, self._mha(x, enc_out, f"dec.{i}.cross")),
                f"dec.{i}.ln2")
            x = self._layer_norm(ag.add(x, self._ff(x, f"dec.{i}")),
                                 f"dec.{i}.ln3")
        return x

    def postnet(self, pre_mel: Tensor) -> Tensor:
        """Residual convolutional refiner; final layer starts at zero so
        training begins from the identity."""
        x = pre_mel
        for i in range(self.cfg.postnet_layers):
            x = ag.conv1d(x, self._p(f"post.{i}.k"), self._p(f"post.{i}.b"))
            if i < self.cfg.postnet_layers - 1:
                x = ag.tanh(x)
        return ag.add(pre_mel, x)

    def decode_teacher_forced(self, enc_out: Tensor, targets: np.ndarray,
                              ref_emb: Tensor, rng,
                              dropout_active: bool = True):
        """Returns (pre_mel T x D, post_mel T x D, stop_logits T x 1)."""
        t, d = targets.shape
        if d != self.cfg.feature_dim:
            raise ag.DimensionError(
                f"target dim {d} != feature dim {self.cfg.feature_dim}")
        shifted = np.zeros_like(targets)
        shifted[1:] = targets[:-1]
        x = self._decoder_input(ag.constant(shifted.astype(self.cfg.dtype)),
                                ref_emb, rng, dropout_active)
        mask = ag.constant(np.triu(np.full((t, t), -1e9, dtype=self.cfg.dtype), 1))
        states = self._decoder_stack(x, enc_out, mask)
        pre_mel = self._affine(states, "out")
        post_mel = self.postnet(pre_mel)
        stop_logits = self._affine(states, "stop")
        return pre_mel, post_mel, stop_logits

    def compute_loss(self, pre_mel, post_mel, stop_logits, targets,
                     stop_targets, lambda_stop: float = 1.0):
        """Total = L1(pre, m) + L1(post, m) + lambda * BCE(stop)."""
        m = ag.constant(np.asarray(targets, dtype=self.cfg.dtype))
        st = ag.constant(np.asarray(stop_targets,
                                    dtype=self.cfg.dtype).reshape(-1, 1))
        loss_pre = ag.l1_loss(pre_mel, m)
        loss_post = ag.l1_loss(post_mel, m)
        loss_stop = ag.bce_with_logits(stop_logits, st)
        total = ag.add(ag.add(loss_pre, loss_post),
                       ag.scale(loss_stop, lambda_stop))
        parts = {"pre": loss_pre.item(), "post": loss_post.item(),
                 "stop": loss_stop.item()}
        return total, parts

    def forward_teacher_forced(self, ids, targets, ref_frames, rng,
                               mode: str = "train",
                               dropout_active: bool = True,
                               lambda_stop: float = 1.0):
        """Full training-path forward; returns (total_loss, parts)."""
        enc_out = self.encode(ids, mode, rng)
        ref_emb = self.reference_embed(ref_frames, rng)
        pre, post, stop = self.decode_teacher_forced(
            enc_out, targets, ref_emb, rng, dropout_active)
        stop_targets = np.zeros(targets.shape[0])
        stop_targets[-1] = 1.0
        return self.compute_loss(pre, post, stop, targets, stop_targets,
                                 lambda_stop)


def stop_targets_for(t: int) -> np.ndarray:
    out = np.zeros(t)
    out[-1] = 1.0
    return out


class DecoderState:
    """Incremental free-running decoder over the same parameters.

    Pure numpy; activations for earlier steps never change under the
    causal mask, so each step transforms only the newest row against
    cached per-layer keys/values.
    """

    def __init__(self, model: StutterTTS, enc_out: np.ndarray,
                 ref_emb: np.ndarray, rng, dropout_active: bool = True):
        self.m = model
        self.cfg = model.cfg
        self.rng = rng
        self.dropout_active = dropout_active
        self.t = 0
        p = self._w
        self.ref_add = ref_emb @ p("ref.proj.w") + p("ref.proj.b")
        self.layers = []
        for i in range(self.cfg.n_decoder_layers):
            cross_k = enc_out @ p(f"dec.{i}.cross.k.w") + p(f"dec.{i}.cross.k.b")
            cross_v = enc_out @ p(f"dec.{i}.cross.v.w") + p(f"dec.{i}.cross.v.b")
            self.layers.append({"self_k": [], "self_v": [],
                                "cross_k": cross_k, "cross_v": cross_v})

    def _w(self, name):
        return self.m.params[name].data

    def _ln(self, x, name):
        mu = x.mean()
        var = ((x - mu) ** 2).mean()
        xhat = (x - mu) / np.sqrt(var + 1e-5)
        return xhat * self._w(f"{name}.gain") + self._w(f"{name}.bias")

    def _dropout(self, x, p):
        if not self.dropout_active or p == 0.0:
            return x
        mask = (self.rng.random(x.shape) >= p) / (1.0 - p)
        return x * mask.astype(x.dtype)

    def _attend_row(self, q_row, keys, values):
        cfg = self.cfg
        dk = cfg.d_model // cfg.n_heads
        out = np.empty_like(q_row)
        for h in range(cfg.n_heads):
            lo, hi = h * dk, (h + 1) * dk
            scores = q_row[lo:hi] @ keys[:, lo:hi].T / np.sqrt(dk)
            scores -= scores.max()
            w = np.exp(scores)
            w /= w.sum()
            out[lo:hi] = w @ values[:, lo:hi]
        return out

    def step(self, prev_frame: np.ndarray):
        """Advance one frame. Returns (pre_mel_frame, stop_probability)."""
        cfg = self.cfg
        p = self._w
        drop = cfg.dropout_prenet
        x = np.asarray(prev_frame, dtype=cfg.dtype).reshape(1, cfg.feature_dim)
        h = np.maximum(x @ p("prenet.l1.w") + p("prenet.l1.b"), 0)
        h = self._dropout(h, drop)
        h = np.maximum(h @ p("prenet.l2.w") + p("prenet.l2.b"), 0)
        h = self._dropout(h, drop)
        row = (h @ p("dec.in.w") + p("dec.in.b") + self.ref_add)[0]
        row = row + float(p("dec.pos.alpha")) * self.m._pe[self.t]
        row = self._ln(row, "dec.pos.ln")
        for i, cache in enumerate(self.layers):
            q = row @ p(f"dec.{i}.self.q.w") + p(f"dec.{i}.self.q.b")[0]
            k = row @ p(f"dec.{i}.self.k.w") + p(f"dec.{i}.self.k.b")[0]
            v = row @ p(f"dec.{i}.self.v.w") + p(f"dec.{i}.self.v.b")[0]
            cache["self_k"].append(k)
            cache["self_v"].append(v)
            attn = self._attend_row(q, np.stack(cache["self_k"]),
                                    np.stack(cache["self_v"]))
            attn = attn @ p(f"dec.{i}.self.o.w") + p(f"dec.{i}.self.o.b")[0]
            row = self._ln(row + attn, f"dec.{i}.ln1")
            q = row @ p(f"dec.{i}.cross.q.w") + p(f"dec.{i}.cross.q.b")[0]
            attn = self._attend_row(q, cache["cross_k"], cache["cross_v"])
            attn = attn @ p(f"dec.{i}.cross.o.w") + p(f"dec.{i}.cross.o.b")[0]
            row = self._ln(row + attn, f"dec.{i}.ln2")
            ff = np.maximum(row @ p(f"dec.{i}.ff1.w") + p(f"dec.{i}.ff1.b")[0], 0)
            ff = ff @ p(f"dec.{i}.ff2.w") + p(f"dec.{i}.ff2.b")[0]
            row = self._ln(row + ff, f"dec.{i}.ln3")
        pre = row @ p("out.w") + p("out.b")[0]
        stop_logit = float((row @ p("stop.w") + p("stop.b")[0])[0])
        self.t += 1
        return pre, 1.0 / (1.0 + np.exp(-stop_logit))
