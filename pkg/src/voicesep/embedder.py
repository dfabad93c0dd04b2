"""Speaker embedding network for the identity loss.

A small 3-stage convolutional classifier over log-compressed power
spectrograms (20 ms Hamming window, 10 ms hop) of 500 ms clips, trained as
a closed-set classifier on the training speakers. The penultimate layer
(width 64 by default) is the embedding used by the identity loss.
"""

from __future__ import annotations

from dataclasses import dataclass, field, asdict

import numpy as np

from . import autodiff as ad
from . import dsp
from .autodiff import Tensor
from .errors import DataError, InputError
from .optim import Adam


@dataclass
class EmbedderConfig:
    sample_rate: int = 8000
    win_ms: float = 20.0
    hop_ms: float = 10.0
    clip_s: float = 0.5
    embed_dim: int = 64
    conv_channels: tuple = (8, 16, 32)
    n_classes: int = 0  # set when trained

    @property
    def win_len(self) -> int:
        return int(round(self.win_ms * self.sample_rate / 1000.0))

    @property
    def hop(self) -> int:
        return int(round(self.hop_ms * self.sample_rate / 1000.0))

    @property
    def nfft(self) -> int:
        return self.win_len

    @property
    def clip_len(self) -> int:
        return int(round(self.clip_s * self.sample_rate))

    def to_dict(self) -> dict:
        d = asdict(self)
        d["conv_channels"] = list(self.conv_channels)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "EmbedderConfig":
        d = dict(d)
        d["conv_channels"] = tuple(d["conv_channels"])
        return cls(**d)


@dataclass
class EmbedderModel:
    config: EmbedderConfig
    params: dict = field(default_factory=dict)
    classes: list = field(default_factory=list)  # speaker ids by class index

    def named_parameters(self):
        return sorted(self.params.items())

    def set_requires_grad(self, flag: bool) -> None:
        for _, p in self.named_parameters():
            p.requires_grad = flag

    # -- forward ----------------------------------------------------------

    def features(self, clip: Tensor) -> Tensor:
        """Log-compressed power spectrogram as a (1, frames, bins) image."""
        cfg = self.config
        p = dsp.power_spectrogram(clip, cfg.win_len, cfg.hop, cfg.nfft)
        feat = ad.log1p(p)
        return ad.reshape(feat, (1,) + tuple(feat.shape))

    def embed_tensor(self, clip: Tensor) -> Tensor:
        """Differentiable embedding of a 500 ms clip tensor."""
        cfg = self.config
        if clip.data.ndim != 1 or clip.shape[0] != cfg.clip_len:
            raise InputError(
                f"embed: clip must be exactly {cfg.clip_len} samples "
                f"({cfg.clip_s:g} s at {cfg.sample_rate} Hz), got shape "
                f"{tuple(clip.shape)}")
        h = self.features(clip)
        for stage in range(len(cfg.conv_channels)):
            h = ad.conv2d(h, self.params[f"conv{stage}.kernel"])
            h = ad.relu(h)
            h = ad.avgpool2d(h, 2)
        pooled = ad.mean_axes(h, (1, 2))       # (C_last,)
        pooled = ad.reshape(pooled, (1, pooled.shape[0]))
        emb = ad.linear(pooled, self.params["embed.w"],
                        self.params["embed.b"])
        emb = ad.relu(emb)
        return ad.reshape(emb, (self.config.embed_dim,))

    def logits_tensor(self, clip: Tensor) -> Tensor:
        emb = self.embed_tensor(clip)
        emb = ad.reshape(emb, (1, self.config.embed_dim))
        out = ad.linear(emb, self.params["cls.w"], self.params["cls.b"])
        return ad.reshape(out, (self.config.n_classes,))

    def embed(self, clip: np.ndarray) -> np.ndarray:
        """Embedding of a 500 ms waveform; deterministic, no tape."""
        return self.embed_tensor(Tensor(np.asarray(clip,
                                                   dtype=np.float32))).data

    def classify(self, clip: np.ndarray) -> int:
        logits = self.logits_tensor(Tensor(np.asarray(clip,
                                                      dtype=np.float32)))
        return int(np.argmax(logits.data))


def _conv_out_hw(h: int, w: int, channels: tuple) -> tuple:
    for _ in channels:
        h, w = (h - 2) // 2, (w - 2) // 2
    return h, w


def init_embedder(config: EmbedderConfig, seed: int) -> EmbedderModel:
    rng = np.random.default_rng(seed)
    cfg = config
    if cfg.n_classes < 2:
        raise DataError("embedder needs at least 2 speaker classes")
    n_frames = 1 + int(np.ceil(cfg.clip_len / cfg.hop))
    n_bins = cfg.nfft // 2 + 1
    hw = _conv_out_hw(n_frames, n_bins, cfg.conv_channels)
    if min(hw) < 1:
        raise DataError("embedder: clip too short for the conv stack")
    p: dict[str, np.ndarray] = {}
    cin = 1
    for stage, cout in enumerate(cfg.conv_channels):
        fan = cin * 9
        lim = 1.0 / np.sqrt(fan)
        p[f"conv{stage}.kernel"] = rng.uniform(
            -lim, lim, size=(cout, cin, 3, 3)).astype(np.float32)
        cin = cout
    lim = 1.0 / np.sqrt(cin)
    p["embed.w"] = rng.uniform(-lim, lim,
                               size=(cin, cfg.embed_dim)).astype(np.float32)
    p["embed.b"] = np.zeros(cfg.embed_dim, dtype=np.float32)
    lim = 1.0 / np.sqrt(cfg.embed_dim)
    p["cls.w"] = rng.uniform(
        -lim, lim, size=(cfg.embed_dim, cfg.n_classes)).astype(np.float32)
    p["cls.b"] = np.zeros(cfg.n_classes, dtype=np.float32)
    model = EmbedderModel(config=cfg)
    for name, arr in p.items():
        model.params[name] = Tensor(arr, requires_grad=True)
    return model


def _accuracy(model: EmbedderModel, clips, labels) -> float:
    correct = sum(1 for clip, lab in zip(clips, labels)
                  if model.classify(clip) == lab)
    return correct / max(len(clips), 1)


def train_embedder(corpus, epochs: int = 20, seed: int = 0,
                   lr: float = 1e-3, batch_size: int = 16,
                   holdout_frac: float = 0.2,
                   config: EmbedderConfig | None = None):
    """Train the closed-set speaker classifier.

    corpus: sequence of (clip waveform, speaker id) with clips of exactly
    500 ms. Returns (model, held-out accuracy). Deterministic given seed.
    """
    by_speaker: dict = {}
    for clip, spk in corpus:
        by_speaker.setdefault(spk, []).append(np.asarray(clip,
                                                         dtype=np.float32))
    if len(by_speaker) < 2:
        raise DataError("train_embedder: need at least 2 speakers")
    for spk, clips in by_speaker.items():
        if len(clips) < 20:
            raise DataError(
                f"train_embedder: speaker {spk} has {len(clips)} clips, "
                "need at least 20")
    classes = sorted(by_speaker)
    cfg = config or EmbedderConfig()
    cfg.n_classes = len(classes)
    sr_len = cfg.clip_len
    rng = np.random.default_rng(seed)

    train_clips, train_labels, hold_clips, hold_labels = [], [], [], []
    for label, spk in enumerate(classes):
        clips = by_speaker[spk]
        for clip in clips:
            if len(clip) != sr_len:
                raise DataError(
                    f"train_embedder: clip of {len(clip)} samples for "
                    f"speaker {spk}, expected {sr_len}")
        order = rng.permutation(len(clips))
        n_hold = max(1, int(round(holdout_frac * len(clips))))
        for pos, ci in enumerate(order):
            if pos < n_hold:
                hold_clips.append(clips[ci])
                hold_labels.append(label)
            else:
                train_clips.append(clips[ci])
                train_labels.append(label)

    model = init_embedder(cfg, seed)
    model.classes = classes
    opt = Adam(model.named_parameters(), lr=lr)
    n = len(train_clips)
    for _ in range(epochs):
        order = rng.permutation(n)
        for lo in range(0, n, batch_size):
            batch = order[lo:lo + batch_size]
            opt.zero_grad()
            with ad.Tape() as tape:
                logit_rows = [
                    ad.reshape(model.logits_tensor(
                        Tensor(train_clips[i])), (1, cfg.n_classes))
                    for i in batch]
                logits = ad.concat(logit_rows, axis=0)
                loss = ad.cross_entropy(logits,
                                        np.array([train_labels[i]
                                                  for i in batch]))
                tape.backward(loss)
            opt.step()
    acc = _accuracy(model, hold_clips, hold_labels)
    return model, acc


def training_accuracy(model: EmbedderModel, corpus) -> float:
    labels = {spk: i for i, spk in enumerate(model.classes)}
    clips = [np.asarray(c, dtype=np.float32) for c, _ in corpus]
    labs = [labels[s] for _, s in corpus]
    return _accuracy(model, clips, labs)
