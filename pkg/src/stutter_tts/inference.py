"""Free-running synthesis from annotated transcripts.

The decoder feeds its own pre-postnet frame back as the next input, with
prenet dropout live (that is what keeps free-running output from
collapsing given the heavy teacher-forcing mismatch). The postnet runs
exactly once, over the finished pre-postnet matrix.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import autograd as ag
from . import frontend as fe
from . import synthdata as sd
from .model import DecoderState, StutterTTS

log = logging.getLogger(__name__)


class RequestError(ValueError):
    pass


@dataclass
class SynthesisRequest:
    utt_id: str
    transcript: str
    reference: np.ndarray  # T x D frames from the target speaker
    stop_threshold: float = 0.5
    max_decode_frames: int | None = None
    seed: int = 0

    def __post_init__(self):
        if isinstance(self.reference, sd.FeatureMatrix):
            self.reference = self.reference.frames
        self.reference = np.asarray(self.reference)
        if not 0.0 < self.stop_threshold < 1.0:
            raise RequestError(
                f"stop threshold must lie in (0, 1), got {self.stop_threshold}")
        if self.max_decode_frames is not None and self.max_decode_frames < 1:
            raise RequestError("max_decode_frames must be positive")


def synthesize(model: StutterTTS, request: SynthesisRequest,
               inventory: fe.PhonemeInventory, lexicon: fe.Lexicon):
    """Run one utterance; returns (FeatureMatrix, info dict).

    info carries n_frames and whether the stop head (rather than the
    frame cap) ended decoding.
    """
    cfg = model.cfg
    if request.reference.ndim != 2 or request.reference.shape[1] != cfg.feature_dim:
        raise RequestError(
            f"reference must be T x {cfg.feature_dim}, got "
            f"{request.reference.shape}")
    text = fe.parse_transcript(request.transcript)
    ids = fe.g2p(text, lexicon, inventory)
    if max(ids) >= cfg.n_phonemes:
        raise RequestError("transcript uses phonemes outside the model "
                           "vocabulary")
    rng = np.random.default_rng([request.seed, 17])
    enc_out = model.encode(ids, mode="infer").data
    ref_emb = model.reference_embed(request.reference, rng).data
    state = DecoderState(model, enc_out, ref_emb, rng, dropout_active=True)

    cap = request.max_decode_frames or cfg.max_decode_frames
    prev = np.zeros(cfg.feature_dim, dtype=cfg.dtype)
    frames = []
    stopped = False
    while len(frames) < cap:
        pre, stop_prob = state.step(prev)
        frames.append(pre)
        prev = pre
        if stop_prob > request.stop_threshold:
            stopped = True
            break
    pre_mel = np.stack(frames).astype(cfg.dtype)
    post = model.postnet(ag.constant(pre_mel)).data
    feats = sd.FeatureMatrix(post.astype(np.float32))
    return feats, {"n_frames": feats.n_frames, "stopped": stopped}


def batch_synthesize(model: StutterTTS, requests, inventory, lexicon,
                     out_dir) -> list[sd.ManifestEntry]:
    """Synthesize each request into out_dir/features plus a manifest.

    Failures are recorded per request (ok=False with the error text) and
    never abort the rest of the batch.
    """
    out_dir = Path(out_dir)
    (out_dir / "features").mkdir(parents=True, exist_ok=True)
    entries = []
    for req in requests:
        rel = f"features/{req.utt_id}.stft"
        try:
            feats, info = synthesize(model, req, inventory, lexicon)
            sd.write_features(out_dir / rel, feats)
            events = fe.parse_transcript(req.transcript).events
            entries.append(sd.ManifestEntry(
                utt_id=req.utt_id, transcript=req.transcript, speaker_id="",
                feature_path=rel, events=list(events),
                n_frames=info["n_frames"]))
        except (RequestError, fe.ParseError, ag.NumericError) as e:
            log.warning("request %s failed: %s", req.utt_id, e)
            entries.append(sd.ManifestEntry(
                utt_id=req.utt_id, transcript="", speaker_id="",
                feature_path="", ok=False, error=str(e)))
    sd.write_manifest(out_dir / "manifest.jsonl", entries)
    return entries
