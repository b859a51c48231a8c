"""End-to-end pipeline: dataset generation, training, separation, evaluation and the step sweep.

Every stage reads and writes files under one output directory::

    out/
      manifest.jsonl, audio/<split>/*.wav
      vae.ckpt, flow.ckpt, diffusion.ckpt, classifier.ckpt
      *_loss.csv, metrics.json, bench_steps.csv, bench_steps.png
"""

from __future__ import annotations

import csv
import json
import logging
import time
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from . import checkpoint as ckpt
from . import dsp, rng
from . import metrics as M
from . import tensor as T
from .codec import VAE, LatentStats, VAEConfig, vae_loss
from .condition import QueryTable, QueryVocab
from .config import ExperimentConfig
from .flow import DiffusionConfig, ddim_sample, ddpm_loss, euler_sample, rfm_loss
from .nn import Module
from .optim import AdamState, adam_step, clip_global_norm
from .tensor import Tensor
from .vfield import VFieldConfig, VFieldNet

log = logging.getLogger("rfsep")

SPLITS = ("train", "val", "test")
ENCODE_BATCH = 64


class PipelineError(RuntimeError):
    """A missing prerequisite or unusable artifact."""


# ----------------------------------------------------------------------------
# dataset

def _split_of(j: int, n: int, fractions: Sequence[float]) -> str:
    n_train = max(1, int(round(fractions[0] * n)))
    n_val = max(1, int(round(fractions[1] * n)))
    if j < n_train:
        return "train"
    return "val" if j < min(n_train + n_val, n - 1) else "test"


def source_audio(cfg: ExperimentConfig, class_id: str, index: int) -> np.ndarray:
    seed = rng.derive_seed(cfg.seed, "source", class_id, index)
    return dsp.synth_source(dsp.random_source_spec(class_id, seed, cfg.data.clip_seconds))


def gen_dataset(cfg: ExperimentConfig, out: Path) -> Path:
    """Write mixtures and their stems as WAV plus ``manifest.jsonl``; returns the manifest path.

    Sources are assigned to splits by clip index, so no source waveform is
    shared between splits. Each mixture pairs two different classes.
    """
    d = cfg.data
    out = Path(out)
    (out / "audio").mkdir(parents=True, exist_ok=True)
    n = d.clips_per_class
    by_split: dict[str, dict[str, list[int]]] = {s: {c: [] for c in d.classes} for s in SPLITS}
    for c in d.classes:
        for j in range(n):
            by_split[_split_of(j, n, d.split_fractions)][c].append(j)

    rows = []
    for split in SPLITS:
        (out / "audio" / split).mkdir(exist_ok=True)
        for c in d.classes:
            for j in by_split[split][c]:
                for m in range(d.mixtures_per_source):
                    s = rng.Stream(cfg.seed, "mixture", split, c, j, m)
                    others = [k for k in d.classes if k != c]
                    noise_class = others[s.integers(len(others))]
                    pool = by_split[split][noise_class]
                    noise_index = pool[s.integers(len(pool))]
                    snr = s.uniform((), *d.snr_range)
                    lufs = s.uniform((), *d.lufs_range)
                    rows.append(_write_mixture(cfg, out, split, c, j, noise_class, noise_index, snr, lufs, m))
    manifest = out / "manifest.jsonl"
    with open(manifest, "w") as f:
        for r in rows:
            f.write(json.dumps(r, sort_keys=True) + "\n")
    log.info("wrote %d mixtures to %s", len(rows), manifest)
    return manifest


def _write_mixture(cfg, out, split, c, j, noise_class, noise_index, snr, lufs, m) -> dict:
    sr = cfg.dsp.sample_rate
    target = source_audio(cfg, c, j)
    noise = source_audio(cfg, noise_class, noise_index)
    mix = dsp.mix_at_snr(target, noise, snr)
    _, lgain = dsp.normalize_to_lufs(mix.mixture, lufs, sr)
    gain = mix.gain * lgain
    tgt, nse = mix.target * lgain, mix.noise * lgain
    peak = float(np.max(np.abs(tgt + nse)))
    if peak > 0.99:
        # joint rescale keeps the SNR; the level lands below the drawn LUFS
        tgt, nse, gain = tgt * (0.99 / peak), nse * (0.99 / peak), gain * 0.99 / peak
    item = f"{split}_{c}_{j:04d}_{m}"
    paths = {}
    for key, x in (("mixture", tgt + nse), ("target", tgt), ("noise", nse)):
        rel = f"audio/{split}/{item}_{key}.wav"
        dsp.wav_write(out / rel, x, sr)
        paths[key + "_path"] = rel
    return {
        "id": item,
        "split": split,
        **paths,
        "query_text": c,
        "target_class": c,
        "noise_class": noise_class,
        "snr_db": round(float(snr), 6),
        "lufs": round(float(lufs), 6),
        "gain_applied": float(gain),
        "seed": rng.derive_seed(cfg.seed, "source", c, j),
        "noise_seed": rng.derive_seed(cfg.seed, "source", noise_class, noise_index),
    }


def read_manifest(path: Path, split: str | None = None) -> list[dict]:
    path = Path(path)
    if not path.exists():
        raise PipelineError(f"manifest {path} not found; run gen-data first")
    rows = [json.loads(line) for line in path.read_text().splitlines() if line.strip()]
    return [r for r in rows if split is None or r["split"] == split]


@dataclass
class SplitData:
    rows: list[dict]
    mix: np.ndarray       # [n, samples]
    target: np.ndarray
    noise: np.ndarray
    mix_mel: np.ndarray   # [n, frames, n_mels]
    target_mel: np.ndarray
    noise_mel: np.ndarray


class Features:
    """Mel front end bound to a config."""

    def __init__(self, cfg: ExperimentConfig):
        self.cfg = cfg
        self.fb = dsp.mel_filterbank(cfg.dsp.n_fft, cfg.dsp.n_mels, cfg.dsp.sample_rate, fmax=cfg.dsp.sample_rate / 2)

    def mel(self, x: np.ndarray) -> np.ndarray:
        c = self.cfg
        return dsp.wav_to_mel(x, self.fb, c.dsp.n_fft, c.dsp.hop, c.frames).astype(np.float32)

    def mels(self, xs) -> np.ndarray:
        return np.stack([self.mel(x) for x in xs])

    def vocode(self, mel: np.ndarray, length: int, seed: int = 0) -> np.ndarray:
        c = self.cfg
        mag = dsp.invert_mel(mel, self.fb)
        return dsp.griffin_lim(mag, c.dsp.griffin_lim_iters, c.dsp.n_fft, c.dsp.hop, length=length, seed=seed)


def load_split(cfg: ExperimentConfig, manifest: Path, split: str, limit: int = 0, feats: Features | None = None) -> SplitData:
    rows = read_manifest(manifest, split)
    if limit:
        rows = rows[:limit]
    if not rows:
        raise PipelineError(f"split {split!r} of {manifest} is empty")
    feats = feats or Features(cfg)
    base = Path(manifest).parent
    audio = {}
    for key in ("mixture", "target", "noise"):
        xs = []
        for r in rows:
            x, sr = dsp.wav_read(base / r[key + "_path"])
            if sr != cfg.dsp.sample_rate:
                raise PipelineError(f"{r[key + '_path']}: sample rate {sr} != {cfg.dsp.sample_rate}")
            xs.append(x)
        audio[key] = np.stack(xs)
    return SplitData(rows, audio["mixture"], audio["target"], audio["noise"],
                     feats.mels(audio["mixture"]), feats.mels(audio["target"]), feats.mels(audio["noise"]))


# ----------------------------------------------------------------------------
# checkpoint helpers

def _param_names(modules: dict[str, Module]) -> list[str]:
    return [n for prefix, mod in modules.items() for n in mod.arrays(prefix + ".")]


def _save_model(path: Path, modules: dict[str, Module], meta: dict, adam: AdamState | None = None,
                adam_modules: dict[str, Module] | None = None) -> None:
    """Parameters of ``modules`` plus the optimizer moments of ``adam_modules`` (default: all)."""
    tensors = {}
    for prefix, mod in modules.items():
        tensors.update(mod.arrays(prefix + "."))
    if adam is not None:
        names = _param_names(modules if adam_modules is None else adam_modules)
        for name, m, v in zip(names, adam.m, adam.v):
            tensors["adam.m." + name] = m
            tensors["adam.v." + name] = v
        meta = {**meta, "adam_step": adam.step}
    ckpt.save(path, tensors, meta)


def _load_adam(tensors, modules: dict[str, Module], meta: dict) -> AdamState:
    names = _param_names(modules)
    return AdamState([tensors["adam.m." + n].copy() for n in names],
                     [tensors["adam.v." + n].copy() for n in names], int(meta["adam_step"]))


def _append_csv(path: Path, header: Sequence[str], rows: list, fresh: bool) -> None:
    with open(path, "w" if fresh else "a", newline="") as f:
        w = csv.writer(f, lineterminator="\n")
        if fresh:
            w.writerow(header)
        w.writerows(rows)


def _truncate_csv(path: Path, upto: int) -> None:
    """Drop logged rows at or beyond step ``upto`` (left over from an interrupted run)."""
    if not path.exists():
        return
    lines = path.read_text().splitlines(keepends=True)
    keep = lines[:1] + [ln for ln in lines[1:] if int(ln.split(",", 1)[0]) < upto]
    path.write_text("".join(keep))


@dataclass
class CodecBundle:
    vae: VAE
    stats: LatentStats
    vocab: QueryVocab

    def encode_mu(self, mels: np.ndarray) -> np.ndarray:
        out = [self.vae.encode(mels[i:i + ENCODE_BATCH])[0].data for i in range(0, len(mels), ENCODE_BATCH)]
        return np.concatenate(out)

    def encode(self, mels: np.ndarray) -> np.ndarray:
        """Standardised latent means."""
        return self.stats.standardize(self.encode_mu(mels))

    def decode(self, z: np.ndarray) -> np.ndarray:
        """Standardised latents -> log-mel [n, frames, n_mels]."""
        z = self.stats.destandardize(z)
        out = [self.vae.decode(Tensor(z[i:i + ENCODE_BATCH])).data[:, 0] for i in range(0, len(z), ENCODE_BATCH)]
        return np.concatenate(out)

    def meta(self) -> dict:
        return {"vae_config": self.vae.config.to_dict(), "latent_stats": self.stats.to_dict(), "vocab": self.vocab.names}


def _vae_config(cfg: ExperimentConfig) -> VAEConfig:
    return VAEConfig(cfg.frames, cfg.dsp.n_mels, cfg.vae.latent_channels, tuple(cfg.vae.widths))


def load_codec(path: Path) -> CodecBundle:
    if not Path(path).exists():
        raise PipelineError(f"VAE checkpoint {path} not found; run train-vae first")
    tensors, meta = ckpt.load(path)
    if "latent_stats" not in meta:
        raise PipelineError(f"{path} has no latent statistics (training incomplete?)")
    vae = VAE(VAEConfig.from_dict(meta["vae_config"]))
    vae.load_arrays(tensors, "vae.")
    return CodecBundle(vae, LatentStats.from_dict(meta["latent_stats"]), QueryVocab(meta["vocab"]))


# ----------------------------------------------------------------------------
# training

def _batch_ids(seed: int, tag: str, step: int, n: int, batch: int) -> np.ndarray:
    return rng.Stream(seed, tag, step).integers(n, batch)


def _run_loop(kind: str, out: Path, total: int, start: int, params, state: AdamState, lr: float, clip: float,
              step_fn, save_fn, header: Sequence[str], log_every: int = 100) -> None:
    csv_path = out / f"{kind}_loss.csv"
    if start == 0:
        _append_csv(csv_path, header, [], fresh=True)
    else:
        _truncate_csv(csv_path, start)
    pending = []
    t0 = time.perf_counter()
    for step in range(start, total):
        values = step_fn(step)
        grads = [p.grad for p in params]
        clip_global_norm(grads, clip)
        adam_step(params, grads, state, lr)
        pending.append([step] + [f"{v:.8g}" for v in values])
        if (step + 1) % log_every == 0 or step + 1 == total:
            _append_csv(csv_path, header, pending, fresh=False)
            pending = []
            log.info("%s step %d/%d loss %.5f (%.1fs)", kind, step + 1, total, values[0], time.perf_counter() - t0)
    save_fn(total)


def train_vae(cfg: ExperimentConfig, out: Path, manifest: Path | None = None, steps: int | None = None) -> Path:
    out = Path(out)
    manifest = manifest or out / "manifest.jsonl"
    total = cfg.vae.steps if steps is None else steps
    data = load_split(cfg, manifest, "train")
    corpus = np.concatenate([data.target_mel, data.noise_mel, data.mix_mel])[:, None]
    if len(corpus) == 0:
        raise PipelineError("empty training corpus")
    path = out / "vae.ckpt"
    vae = VAE(_vae_config(cfg), seed=rng.derive_seed(cfg.seed, "vae-init"))
    params = vae.parameters()
    start, state = 0, AdamState.for_params(params)
    if path.exists():
        tensors, meta = ckpt.load(path)
        if meta.get("config_hash") == cfg.hash() and meta["step"] <= total:
            vae.load_arrays(tensors, "vae.")
            start, state = meta["step"], _load_adam(tensors, {"vae": vae}, meta)
            log.info("resuming VAE training at step %d", start)

    def step_fn(step):
        idx = _batch_ids(cfg.seed, "vae-batch", step, len(corpus), cfg.vae.batch)
        with T.Tape() as tape:
            loss, recon, kl = vae_loss(vae, corpus[idx], cfg.vae.beta, rng.derive_seed(cfg.seed, "vae-eps", step))
        tape.backward(loss, wrt=params)
        return float(loss.data), recon, kl

    def save_fn(step):
        stats = LatentStats.fit(CodecBundle(vae, None, None).encode_mu(corpus))
        vocab = QueryVocab(cfg.data.classes)
        meta = {"kind": "vae", "step": step, "config_hash": cfg.hash(), "config": cfg.to_dict(),
                **CodecBundle(vae, stats, vocab).meta()}
        _save_model(path, {"vae": vae}, meta, state)

    _run_loop("vae", out, total, start, params, state, cfg.vae.lr, 1e9, step_fn, save_fn, ["step", "loss", "recon", "kl"])
    return path


@dataclass
class Separator:
    """Trained separator: codec plus a conditional vector field (flow) or noise predictor (diffusion)."""

    kind: str
    codec: CodecBundle
    net: VFieldNet
    table: QueryTable
    cfg: ExperimentConfig
    step: int = 0
    clip_x0: float | None = None  # diffusion only: largest |z| among the training targets

    def query_ids(self, queries: Sequence[str]) -> np.ndarray:
        return np.array([self.codec.vocab.id(q) for q in queries], dtype=np.int64)

    def sample(self, zm: np.ndarray, query_ids: np.ndarray, steps: int, seeds: Sequence[int], batch: int = 32) -> np.ndarray:
        out = []
        for i in range(0, len(zm), batch):
            q = self.table(query_ids[i:i + batch])
            if self.kind == "flow":
                out.append(euler_sample(self.net, zm[i:i + batch], q, steps, list(seeds[i:i + batch]), self.cfg.flow.method))
            else:
                out.append(ddim_sample(self.net, zm[i:i + batch], q, steps, list(seeds[i:i + batch]), _schedule(self.cfg),
                                       clip_x0=self.clip_x0))
        return np.concatenate(out)


def _schedule(cfg: ExperimentConfig) -> DiffusionConfig:
    d = cfg.diffusion
    return DiffusionConfig(d.diffusion_steps, d.beta_start, d.beta_end)


def _build_separator(kind: str, cfg: ExperimentConfig, codec: CodecBundle) -> Separator:
    sec = cfg.flow if kind == "flow" else cfg.diffusion
    vcfg = VFieldConfig(in_channels=2 * codec.vae.config.latent_channels, out_channels=codec.vae.config.latent_channels,
                        widths=tuple(sec.widths))
    net = VFieldNet(vcfg, seed=rng.derive_seed(cfg.seed, kind, "init"))
    table = QueryTable(len(codec.vocab), vcfg.query_dim, seed=rng.derive_seed(cfg.seed, kind, "query"))
    return Separator(kind, codec, net, table, cfg)


def load_separator(path: Path) -> Separator:
    path = Path(path)
    if not path.exists():
        raise PipelineError(f"checkpoint {path} not found")
    tensors, meta = ckpt.load(path)
    if meta.get("kind") not in ("flow", "diffusion"):
        raise PipelineError(f"{path} is not a separator checkpoint (kind={meta.get('kind')!r})")
    from .config import from_dict
    cfg = from_dict(meta["config"])
    vae = VAE(VAEConfig.from_dict(meta["vae_config"]))
    vae.load_arrays(tensors, "vae.")
    codec = CodecBundle(vae, LatentStats.from_dict(meta["latent_stats"]), QueryVocab(meta["vocab"]))
    sep = _build_separator(meta["kind"], cfg, codec)
    sep.net.load_arrays(tensors, "vfield.")
    sep.table.load_arrays(tensors, "query.")
    sep.step = meta["step"]
    sep.clip_x0 = meta.get("clip_x0")
    return sep


def training_pairs(cfg: ExperimentConfig, codec: CodecBundle, data: SplitData):
    """(z1, zm, class id) for both stems of every mixture: each stem is a valid separation target."""
    zm = codec.encode(data.mix_mel)
    zt = codec.encode(data.target_mel)
    zn = codec.encode(data.noise_mel)
    qt = np.array([codec.vocab.id(r["target_class"]) for r in data.rows])
    qn = np.array([codec.vocab.id(r["noise_class"]) for r in data.rows])
    return np.concatenate([zt, zn]), np.concatenate([zm, zm]), np.concatenate([qt, qn])


def train_separator(kind: str, cfg: ExperimentConfig, out: Path, manifest: Path | None = None,
                    steps: int | None = None, probe=None) -> Path:
    """Train the flow (``kind="flow"``) or diffusion baseline on top of ``out/vae.ckpt``.

    ``probe(step, z_in, zm_batch)``, if given, sees every network input.
    """
    if kind not in ("flow", "diffusion"):
        raise ValueError(f"unknown separator kind {kind!r}")
    out = Path(out)
    manifest = manifest or out / "manifest.jsonl"
    codec = load_codec(out / "vae.ckpt")
    sec = cfg.flow if kind == "flow" else cfg.diffusion
    total = sec.steps if steps is None else steps
    z1, zm, q = training_pairs(cfg, codec, load_split(cfg, manifest, "train"))
    sep = _build_separator(kind, cfg, codec)
    modules = {"vfield": sep.net, "query": sep.table}
    params = sep.net.parameters() + sep.table.parameters()
    path = out / f"{kind}.ckpt"
    start, state = 0, AdamState.for_params(params)
    if path.exists():
        tensors, meta = ckpt.load(path)
        if meta.get("config_hash") == cfg.hash() and meta["step"] <= total:
            sep.net.load_arrays(tensors, "vfield.")
            sep.table.load_arrays(tensors, "query.")
            start, state = meta["step"], _load_adam(tensors, modules, meta)
            log.info("resuming %s training at step %d", kind, start)
    schedule = _schedule(cfg)

    def step_fn(step):
        idx = _batch_ids(cfg.seed, kind + "-batch", step, len(z1), sec.batch)
        seed = rng.derive_seed(cfg.seed, kind + "-noise", step)
        with T.Tape() as tape:
            query = sep.table(q[idx])
            if kind == "flow":
                loss, z_in, _ = rfm_loss(sep.net, z1[idx], query, zm[idx], cfg.flow.sigma_min, seed)
            else:
                loss, z_in, _ = ddpm_loss(sep.net, z1[idx], query, zm[idx], schedule, seed)
        if probe is not None:
            probe(step, z_in, zm[idx])
        tape.backward(loss, wrt=params)
        return (float(loss.data),)

    def save_fn(step):
        meta = {"kind": kind, "step": step, "config_hash": cfg.hash(), "config": cfg.to_dict(),
                "vfield_config": sep.net.config.to_dict(), **codec.meta()}
        if kind == "diffusion":
            meta["clip_x0"] = float(np.max(np.abs(z1)))
        # the frozen VAE rides along so one file is enough for inference
        _save_model(path, {"vae": codec.vae, **modules}, meta, state, adam_modules=modules)

    _run_loop(kind, out, total, start, params, state, sec.lr, sec.grad_clip, step_fn, save_fn, ["step", "loss"])
    return path


# ----------------------------------------------------------------------------
# query classifier (evaluation embedding network)

def classifier_corpus(cfg: ExperimentConfig, data: SplitData, vocab: QueryVocab):
    """Single-source mels: every target and noise stem with its class id."""
    mels = np.concatenate([data.target_mel, data.noise_mel])
    labels = [vocab.id(r["target_class"]) for r in data.rows] + [vocab.id(r["noise_class"]) for r in data.rows]
    return mels, np.array(labels)


def train_classifier(cfg: ExperimentConfig, out: Path, manifest: Path | None = None) -> Path:
    out = Path(out)
    manifest = manifest or out / "manifest.jsonl"
    vocab = QueryVocab(cfg.data.classes)
    mels, labels = classifier_corpus(cfg, load_split(cfg, manifest, "train"), vocab)
    c = cfg.classifier
    clf, losses = M.train_query_classifier(mels, labels, len(vocab), c.steps, c.batch, c.lr,
                                           seed=rng.derive_seed(cfg.seed, "classifier"))
    held_mels, held_labels = classifier_corpus(cfg, load_split(cfg, manifest, "test"), vocab)
    acc = M.accuracy(clf, held_mels, held_labels)
    log.info("query classifier held-out accuracy %.4f", acc)
    _append_csv(out / "classifier_loss.csv", ["step", "loss"], [[i, f"{v:.8g}"] for i, v in enumerate(losses)], fresh=True)
    path = out / "classifier.ckpt"
    meta = {"kind": "classifier", "step": c.steps, "config_hash": cfg.hash(), "vocab": vocab.names,
            "frames": cfg.frames, "n_mels": cfg.dsp.n_mels, "heldout_accuracy": acc}
    _save_model(path, {"clf": clf}, meta)
    return path


def load_classifier(path: Path) -> tuple[M.QueryClassifier, dict]:
    if not Path(path).exists():
        raise PipelineError(f"classifier checkpoint {path} not found")
    tensors, meta = ckpt.load(path)
    clf = M.QueryClassifier(len(meta["vocab"]), meta["frames"], meta["n_mels"])
    try:
        clf.load_arrays(tensors, "clf.")
    except (KeyError, ValueError) as exc:
        raise PipelineError(f"{path} does not fit this classifier ({exc}); rerun train-classifier") from None
    return clf, meta


def ensure_classifier(cfg: ExperimentConfig, out: Path, manifest: Path) -> tuple[M.QueryClassifier, dict]:
    path = Path(out) / "classifier.ckpt"
    if not path.exists():
        log.info("no classifier at %s; training one", path)
        train_classifier(cfg, out, manifest)
    return load_classifier(path)


# ----------------------------------------------------------------------------
# separation

@dataclass
class SeparationResult:
    wavs: np.ndarray        # [n, samples] vocoded estimates
    mels: np.ndarray        # [n, frames, n_mels] mel of the vocoded estimates
    decoded: np.ndarray     # [n, frames, n_mels] decoder output before vocoding
    latents: np.ndarray
    sampler_seconds: float
    decode_seconds: float


def item_seed(cfg: ExperimentConfig, item_id: str) -> int:
    return rng.derive_seed(cfg.seed, "separate", item_id)


def separate_batch(sep: Separator, feats: Features, mix_mels: np.ndarray, queries: Sequence[str], steps: int,
                   seeds: Sequence[int], length: int) -> SeparationResult:
    ids = sep.query_ids(queries)
    zm = sep.codec.encode(mix_mels)
    t0 = time.perf_counter()
    z = sep.sample(zm, ids, steps, seeds)
    t1 = time.perf_counter()
    decoded = sep.codec.decode(z)
    wavs = np.stack([_fit_peak(feats.vocode(m, length, seed=s)) for m, s in zip(decoded, seeds)])
    t2 = time.perf_counter()
    return SeparationResult(wavs, feats.mels(wavs), decoded, z, t1 - t0, t2 - t1)


def _fit_peak(x: np.ndarray, limit: float = 0.99) -> np.ndarray:
    peak = float(np.max(np.abs(x), initial=0.0))
    return x * (limit / peak) if peak > limit else x


def separate_file(sep: Separator, mixture_wav: Path, query: str, steps: int, out_wav: Path, seed: int | None = None,
                  png: Path | None = None, target_wav: Path | None = None, dump: Path | None = None) -> np.ndarray:
    """Separate a WAV of any length in clip-sized chunks; the output has the input's length."""
    cfg = sep.cfg
    sep.codec.vocab.id(query)
    x, sr = dsp.wav_read(mixture_wav)
    if sr != cfg.dsp.sample_rate:
        raise dsp.AudioError(f"{mixture_wav}: sample rate {sr} Hz, expected {cfg.dsp.sample_rate}")
    if len(x) == 0:
        raise dsp.AudioError(f"{mixture_wav}: empty file")
    feats = Features(cfg)
    n = cfg.clip_samples
    chunks = -(-len(x) // n)
    padded = np.pad(x, (0, chunks * n - len(x)))
    mix_mels = feats.mels(padded.reshape(chunks, n))
    base = rng.derive_seed(cfg.seed if seed is None else seed, "separate", Path(mixture_wav).name)
    seeds = [rng.derive_seed(base, i) for i in range(chunks)]
    zm = sep.codec.encode(mix_mels)
    z = sep.sample(zm, sep.query_ids([query] * chunks), steps, seeds)
    decoded = sep.codec.decode(z)
    # vocode the chunks as one continuous spectrogram
    est = _fit_peak(feats.vocode(np.concatenate(list(decoded)), chunks * n, seed=seeds[0])[:len(x)])
    dsp.wav_write(out_wav, est, sr)
    if dump is not None:
        np.savez(dump, mixture_mel=mix_mels, zm=zm, z1_hat=z, decoded_mel=decoded)
    if png is not None:
        panels = [("mixture", np.concatenate(list(mix_mels))), ("estimate", feats.mels(est[None])[0] if chunks == 1 else decoded.reshape(-1, decoded.shape[-1]))]
        if target_wav is not None:
            tgt, _ = dsp.wav_read(target_wav)
            panels.append(("target", np.concatenate(list(feats.mels(np.pad(tgt, (0, max(0, chunks * n - len(tgt))))[:chunks * n].reshape(chunks, n))))))
        save_triptych(png, panels, f"query: {query}, {steps} steps")
    return est


def save_triptych(path: Path, panels: list[tuple[str, np.ndarray]], title: str = "") -> None:
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    fig, axes = plt.subplots(1, len(panels), figsize=(4 * len(panels), 3.2), sharey=True)
    axes = np.atleast_1d(axes)
    for ax, (name, mel) in zip(axes, panels):
        ax.imshow(np.asarray(mel).T, origin="lower", aspect="auto", vmin=-5, vmax=float(np.max(mel)), cmap="magma")
        ax.set_title(name)
        ax.set_xlabel("frame")
    axes[0].set_ylabel("mel bin")
    if title:
        fig.suptitle(title)
    fig.tight_layout()
    fig.savefig(path, dpi=90, metadata={"Software": None})
    plt.close(fig)


# ----------------------------------------------------------------------------
# evaluation

def _row_metrics(clf: M.QueryClassifier, est_mels, est_wavs, data: SplitData, query_ids, ref_stats) -> dict:
    emb = M.batched(lambda m: M.embedding_of(m, clf), est_mels)
    probs = M.batched(clf.probs, est_mels)
    lsd = [M.log_spectral_distance(a, b) for a, b in zip(est_mels, data.target_mel)]
    sdr = [M.si_sdr(a, b) for a, b in zip(est_wavs, data.target)]
    cons = probs[np.arange(len(probs)), query_ids]
    return {
        "frechet_proxy": M.frechet_distance(M.embedding_stats(emb), ref_stats),
        "lsd_db": M.summarize(lsd),
        "si_sdr_db": M.summarize(sdr),
        "consistency": M.summarize(cons),
        "argmax_match": M.summarize((probs.argmax(-1) == query_ids).astype(float)),
    }


def reference_stats(clf: M.QueryClassifier, data: SplitData) -> M.EmbedStats:
    return M.embedding_stats(M.batched(lambda m: M.embedding_of(m, clf), data.target_mel))


def evaluate(ckpt_path: Path, out: Path, manifest: Path | None = None, steps: int | None = None,
             split: str | None = None, report_path: Path | None = None) -> dict:
    """Metrics for one separator against clean targets, with the Unprocessed (mixture) row."""
    out = Path(out)
    sep = load_separator(ckpt_path)
    cfg = sep.cfg
    manifest = manifest or out / "manifest.jsonl"
    split = split or cfg.eval.split
    steps = steps or (cfg.flow.sample_steps if sep.kind == "flow" else 50)
    feats = Features(cfg)
    data = load_split(cfg, manifest, split, cfg.eval.max_items, feats)
    clf, clf_meta = ensure_classifier(cfg, out, manifest)
    ids = sep.query_ids([r["query_text"] for r in data.rows])
    ref = reference_stats(clf, data)
    res = separate_batch(sep, feats, data.mix_mel, [r["query_text"] for r in data.rows], steps,
                         [item_seed(cfg, r["id"]) for r in data.rows], cfg.clip_samples)
    report = {
        "checkpoint": {"kind": sep.kind, "step": sep.step, "config_hash": cfg.hash()},
        "split": split,
        "n_items": len(data.rows),
        "steps": steps,
        "items": [r["id"] for r in data.rows],
        "classifier_heldout_accuracy": clf_meta["heldout_accuracy"],
        "unprocessed": _row_metrics(clf, data.mix_mel, data.mix, data, ids, ref),
        sep.kind: _row_metrics(clf, res.mels, res.wavs, data, ids, ref),
    }
    M.write_report(report_path or out / "metrics.json", report)
    return report


def query_swap(sep: Separator, out: Path, manifest: Path, steps: int, n_items: int = 50,
               split: str | None = None) -> dict:
    """Separate each mixture once per constituent class; count mixtures where both estimates match their query."""
    cfg = sep.cfg
    feats = Features(cfg)
    data = load_split(cfg, manifest, split or cfg.eval.split, 0, feats)
    rows = data.rows[:n_items]
    clf, _ = ensure_classifier(cfg, out, manifest)
    mels = data.mix_mel[:len(rows)]
    qa = [r["target_class"] for r in rows]
    qb = [r["noise_class"] for r in rows]
    seeds = [item_seed(cfg, r["id"]) for r in rows]
    ra = separate_batch(sep, feats, mels, qa, steps, seeds, cfg.clip_samples)
    rb = separate_batch(sep, feats, mels, qb, steps, seeds, cfg.clip_samples)
    pa = M.batched(clf.probs, ra.mels).argmax(-1)
    pb = M.batched(clf.probs, rb.mels).argmax(-1)
    ok_a = pa == sep.query_ids(qa)
    ok_b = pb == sep.query_ids(qb)
    return {"n": len(rows), "both": float(np.mean(ok_a & ok_b)), "query_a": float(np.mean(ok_a)),
            "query_b": float(np.mean(ok_b))}


# ----------------------------------------------------------------------------
# step-count sweep

def bench_steps(flow_ckpt: Path, diffusion_ckpt: Path | None, out: Path, manifest: Path | None = None,
                flow_steps: Sequence[int] | None = None, diffusion_steps: Sequence[int] | None = None) -> list[dict]:
    """Per (model, N): sampler and decode seconds per item, Fréchet proxy and mean consistency."""
    out = Path(out)
    flow = load_separator(flow_ckpt)
    cfg = flow.cfg
    manifest = manifest or out / "manifest.jsonl"
    models = [(flow, list(flow_steps or cfg.eval.flow_steps))]
    if diffusion_ckpt is not None:
        models.append((load_separator(diffusion_ckpt), list(diffusion_steps or cfg.eval.diffusion_steps)))
    feats = Features(cfg)
    data = load_split(cfg, manifest, cfg.eval.split, cfg.eval.max_items, feats)
    clf, _ = ensure_classifier(cfg, out, manifest)
    ref = reference_stats(clf, data)
    queries = [r["query_text"] for r in data.rows]
    ids = flow.query_ids(queries)
    seeds = [item_seed(cfg, r["id"]) for r in data.rows]
    n = len(data.rows)
    rows = [{"model": "unprocessed", "steps": 0, "sampler_s": 0.0, "decode_s": 0.0,
             "frechet_proxy": M.frechet_distance(M.embedding_stats(M.batched(lambda m: M.embedding_of(m, clf), data.mix_mel)), ref),
             "consistency": float(np.mean(M.batched(clf.probs, data.mix_mel)[np.arange(n), ids]))}]
    for sep, steps_list in models:
        for steps in steps_list:
            res = separate_batch(sep, feats, data.mix_mel, queries, steps, seeds, cfg.clip_samples)
            emb = M.batched(lambda m: M.embedding_of(m, clf), res.mels)
            probs = M.batched(clf.probs, res.mels)
            rows.append({"model": sep.kind, "steps": steps, "sampler_s": res.sampler_seconds / n,
                         "decode_s": res.decode_seconds / n,
                         "frechet_proxy": M.frechet_distance(M.embedding_stats(emb), ref),
                         "consistency": float(np.mean(probs[np.arange(n), ids]))})
            log.info("%s@%d: frechet %.4f consistency %.3f sampler %.3fs/item", sep.kind, steps,
                     rows[-1]["frechet_proxy"], rows[-1]["consistency"], rows[-1]["sampler_s"])
    fields_ = ["model", "steps", "sampler_s", "decode_s", "frechet_proxy", "consistency"]
    with open(out / "bench_steps.csv", "w", newline="") as f:
        w = csv.DictWriter(f, fields_, lineterminator="\n")
        w.writeheader()
        w.writerows(rows)
    _plot_bench(out / "bench_steps.png", rows)
    return rows


def timing_r2(rows: list[dict], model: str = "flow") -> float:
    """Coefficient of determination of a linear fit of sampler time against N."""
    pts = np.array([(r["steps"], r["sampler_s"]) for r in rows if r["model"] == model], dtype=np.float64)
    if len(pts) < 3:
        raise PipelineError("need at least 3 step counts for a timing fit")
    slope, icept = np.polyfit(pts[:, 0], pts[:, 1], 1)
    resid = pts[:, 1] - (slope * pts[:, 0] + icept)
    return float(1.0 - resid @ resid / np.sum((pts[:, 1] - pts[:, 1].mean()) ** 2))


def _plot_bench(path: Path, rows: list[dict]) -> None:
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    fig, (a1, a2) = plt.subplots(1, 2, figsize=(9, 3.5))
    for model, marker in (("flow", "o"), ("diffusion", "s")):
        pts = [r for r in rows if r["model"] == model]
        if not pts:
            continue
        x = [r["steps"] for r in pts]
        a1.plot(x, [r["frechet_proxy"] for r in pts], marker=marker, label=model)
        a2.plot(x, [r["sampler_s"] for r in pts], marker=marker, label=model)
    base = [r for r in rows if r["model"] == "unprocessed"]
    if base:
        a1.axhline(base[0]["frechet_proxy"], color="gray", ls="--", label="unprocessed")
    for ax, lab in ((a1, "Fréchet proxy"), (a2, "sampler seconds / item")):
        ax.set_xscale("log")
        ax.set_xlabel("inference steps")
        ax.set_ylabel(lab)
        ax.legend()
    fig.tight_layout()
    fig.savefig(path, dpi=90, metadata={"Software": None})
    plt.close(fig)
