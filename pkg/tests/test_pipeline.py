"""End-to-end checks on the tiny preset (seconds per stage)."""

import csv
import json

import numpy as np
import pytest

from rfsep import checkpoint as ck
from rfsep import cli, dsp
from rfsep import config as C
from rfsep.condition import QueryError
from rfsep import experiment as E
from rfsep.flow import rfm_loss

pytestmark = pytest.mark.slow


@pytest.fixture(scope="module")
def run(tmp_path_factory):
    cfg = C.preset("tiny")
    out = tmp_path_factory.mktemp("tiny")
    manifest = E.gen_dataset(cfg, out)
    E.train_vae(cfg, out, manifest)
    E.train_separator("flow", cfg, out, manifest)
    return cfg, out, manifest


def test_manifest_rows(run):
    cfg, out, manifest = run
    rows = E.read_manifest(manifest)
    assert len(rows) == len(cfg.data.classes) * cfg.data.clips_per_class * cfg.data.mixtures_per_source
    sources = {}
    for r in rows:
        assert r["target_class"] != r["noise_class"]
        assert r["query_text"] == r["target_class"]
        assert cfg.data.snr_range[0] <= r["snr_db"] <= cfg.data.snr_range[1]
        for seed in (r["seed"], r["noise_seed"]):
            sources.setdefault(seed, set()).add(r["split"])
    assert all(len(s) == 1 for s in sources.values()), "a source clip appears in two splits"


def test_snr_and_mixture_sum(run):
    cfg, out, manifest = run
    for r in E.read_manifest(manifest):
        t, _ = dsp.wav_read(out / r["target_path"])
        n, _ = dsp.wav_read(out / r["noise_path"])
        m, _ = dsp.wav_read(out / r["mixture_path"])
        assert abs(dsp.snr_db(t, n) - r["snr_db"]) <= 0.01
        assert np.max(np.abs(m - (t + n))) <= 2 / 32767
        assert np.max(np.abs(m)) <= 1.0


def test_manifest_is_reproducible(run, tmp_path):
    cfg, _, manifest = run
    again = E.gen_dataset(cfg, tmp_path)
    assert again.read_bytes() == manifest.read_bytes()
    other = E.gen_dataset(cfg.with_seed(1), tmp_path / "s1")
    assert other.read_bytes() != manifest.read_bytes()


def test_resume_is_bitwise_identical(run, tmp_path):
    cfg, out, manifest = run
    (tmp_path / "vae.ckpt").write_bytes((out / "vae.ckpt").read_bytes())
    E.train_separator("flow", cfg, tmp_path, manifest, steps=10)
    E.train_separator("flow", cfg, tmp_path, manifest, steps=cfg.flow.steps)
    assert (tmp_path / "flow.ckpt").read_bytes() == (out / "flow.ckpt").read_bytes()
    assert (tmp_path / "flow_loss.csv").read_text() == (out / "flow_loss.csv").read_text()


def test_initial_loss_is_target_energy(run):
    cfg, out, manifest = run
    codec = E.load_codec(out / "vae.ckpt")
    z1, zm, q = E.training_pairs(cfg, codec, E.load_split(cfg, manifest, "train"))
    sep = E._build_separator("flow", cfg, codec)
    loss, _, v = rfm_loss(sep.net, z1[:4], sep.table(q[:4]), zm[:4], cfg.flow.sigma_min, seed=3)
    assert float(loss.data) == pytest.approx(float(np.mean(v.astype(np.float64) ** 2)), rel=1e-5)
    with open(out / "flow_loss.csv") as f:
        rows = list(csv.DictReader(f))
    assert [int(r["step"]) for r in rows] == list(range(cfg.flow.steps))


def test_checkpoint_contents(run):
    _, out, _ = run
    tensors, meta = ck.load(out / "flow.ckpt")
    assert meta["kind"] == "flow" and meta["step"] == 20
    assert any(k.startswith("vae.") for k in tensors)
    assert any(k.startswith("adam.m.") for k in tensors)
    sep = E.load_separator(out / "flow.ckpt")
    assert sep.codec.vocab.id("sine") >= 0


def test_separate_file_any_length(run, tmp_path):
    cfg, out, manifest = run
    sep = E.load_separator(out / "flow.ckpt")
    row = E.read_manifest(manifest, "test")[0]
    x, sr = dsp.wav_read(out / row["mixture_path"])
    long = tmp_path / "long.wav"
    dsp.wav_write(long, np.concatenate([x, x[: len(x) // 3]]), sr)
    a = E.separate_file(sep, long, row["query_text"], 2, tmp_path / "a.wav", png=tmp_path / "a.png",
                        dump=tmp_path / "a.npz")
    b = E.separate_file(sep, long, row["query_text"], 2, tmp_path / "b.wav")
    assert len(a) == len(x) + len(x) // 3
    np.testing.assert_array_equal(a, b)
    assert (tmp_path / "a.png").stat().st_size > 0
    assert set(np.load(tmp_path / "a.npz")) == {"mixture_mel", "zm", "z1_hat", "decoded_mel"}
    with pytest.raises(QueryError):
        E.separate_file(sep, long, "kazoo", 2, tmp_path / "c.wav")


def test_diffusion_requires_vae(tmp_path):
    cfg = C.preset("tiny")
    with pytest.raises(E.PipelineError):
        E.train_separator("diffusion", cfg, tmp_path)


def test_evaluate_report(run):
    cfg, out, manifest = run
    rep = E.evaluate(out / "flow.ckpt", out, steps=2)
    saved = json.loads((out / "metrics.json").read_text())
    assert saved["n_items"] == rep["n_items"] <= cfg.eval.max_items
    for row in ("unprocessed", "flow"):
        assert set(saved[row]) == {"frechet_proxy", "lsd_db", "si_sdr_db", "consistency", "argmax_match"}
        assert len(saved[row]["lsd_db"]["per_item"]) == rep["n_items"]
    sdr = saved["unprocessed"]["si_sdr_db"]
    assert sdr["mean"] == pytest.approx(np.mean(sdr["per_item"]))


def test_cli_exit_codes(run, tmp_path, capsys):
    _, out, _ = run
    assert cli.main(["selftest"]) == 0
    assert cli.main(["train-flow", "--preset", "tiny", "--out", str(tmp_path)]) == 1
    assert cli.main(["separate", str(out / "flow.ckpt"), str(tmp_path / "missing.wav"), "sine", "--out", str(tmp_path)]) == 1
    wav = next((out / "audio" / "test").glob("*_mixture.wav"))
    assert cli.main(["separate", str(out / "flow.ckpt"), str(wav), "kazoo", "--out", str(tmp_path)]) == 2
    bad = tmp_path / "bad.json"
    bad.write_text('{"flow": {"nope": 1}}')
    assert cli.main(["gen-data", "--config", str(bad), "--out", str(tmp_path)]) == 2
    assert cli.main(["separate", str(out / "flow.ckpt"), str(wav), "sine", "--steps", "1", "--out", str(tmp_path)]) == 0
    assert capsys.readouterr().out.strip().endswith(".estimate.wav")


def test_incompatible_classifier_is_pipeline_error(tmp_path):
    meta = {"kind": "classifier", "vocab": ["sine", "am_tone"], "frames": 100, "n_mels": 64}
    ck.save(tmp_path / "classifier.ckpt", {"clf.emb.weight": np.zeros((32, 7), np.float32)}, meta)
    with pytest.raises(E.PipelineError, match="train-classifier"):
        E.load_classifier(tmp_path / "classifier.ckpt")
