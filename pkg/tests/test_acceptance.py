"""Exit criteria for the whole pipeline, one test per criterion.

Each test records a one-line PASS/FAIL summary that is printed at the end of
the pytest run.  Criteria 6 and 7 generate synthetic corpora and train; they
take a few minutes together.
"""

import hashlib
import math
import time

import numpy as np
import pytest

from conftest import ACCEPTANCE
from envspoof.audio import TARGET_LENGTH, AudioClip, fit_duration, read_wav, resample, to_mono, write_wav
from envspoof.cli import main
from envspoof.datakit import Entry, gen_synthetic_corpus, resolve, select
from envspoof.encoder import AudioStacks, EncoderSpec, LayerStack, read_layerstack, write_layerstack
from envspoof.errors import FormatError
from envspoof.evaluation import compute_eer, eer_oracle, score_manifest
from envspoof.features import compute_global_stats, fit_frames, logmel, normalize
from envspoof.model import (GROUPS, Checkpoint, ModelConfig, ModelParams, backward, forward, fuse,
                            init_params, load_checkpoint, save_checkpoint, select_layers)
from envspoof.numerics import finite_diff_check, make_rng
from envspoof.training import (ClassWeights, TrainConfig, auto_class_weights, finetune, train,
                               weighted_loss)

from helpers import ToyStacks, toy_entries


def record(key, ok, detail):
    ACCEPTANCE[key] = (bool(ok), detail)
    assert ok, detail


# 1 ---------------------------------------------------------------------------

def test_c1_gradient_fidelity():
    start = time.perf_counter()
    cfg = ModelConfig(dim=8, hidden=8, attn=4, layers=(4, 5, 6, 7, 8, 9), dropout=0.0)
    r = make_rng(2024)
    params = init_params(cfg, r, np.float64)
    for arr in params.tensors.values():
        arr += r.normal(0.0, 0.1, arr.shape)
    stacks = select_layers(r.normal(size=(4, 12, 16, 8)), cfg.layers)
    labels = ["bona", "spoof", "spoof", "bona"]
    weights = ClassWeights(4.0, 1.0)

    def loss_of(t):
        return weighted_loss(forward(stacks, ModelParams(cfg, dict(t))).logits, labels, weights)[0]

    result = forward(stacks, params)
    grads = backward(result, weighted_loss(result.logits, labels, weights)[1], params)
    report = finite_diff_check(loss_of, params.tensors, grads, h=1e-5)
    per_group = {g: max(report[n] for n in names) for g, names in GROUPS.items()}
    elapsed = time.perf_counter() - start
    worst = max(per_group.values())
    record("c1 gradient fidelity", worst < 1e-4 and elapsed < 30,
           f"max rel err {worst:.2e} (<1e-4) "
           + " ".join(f"{g}={v:.1e}" for g, v in per_group.items()) + f", {elapsed:.1f}s (<30s)")


# 2 ---------------------------------------------------------------------------

def test_c2_fusion_invariants():
    tr, dev = toy_entries(16, 48, "train"), toy_entries(4, 12, "dev")
    src = ToyStacks(tr + dev)
    cfg = TrainConfig(hidden=8, attn=4, batch_size=8, max_steps=200, eval_every=50, seed=5, lr=1e-2)
    result = train(tr, dev, src, cfg)
    sums_err = float(np.max(np.abs(result.trajectory.sum(axis=1) - 1.0)))
    steps = result.trajectory.shape[0]

    p6 = result.final.astype(np.float64)
    full_cfg = ModelConfig(dim=8, hidden=8, attn=4, layers=tuple(range(1, 13)), dropout=0.0)
    logits12 = np.full(12, -1e6)
    logits12[3:9] = p6.tensors["fusion"]
    p12 = ModelParams(full_cfg, dict(p6.tensors, fusion=logits12))
    stacks = np.stack([src(e.trial_id).layers for e in dev]).astype(np.float64)
    fused_err = max(float(np.max(np.abs(fuse(LayerStack(s), p6.tensors["fusion"]) -
                                        fuse(LayerStack(s), logits12, range(1, 13))))) for s in stacks)
    s6 = forward(select_layers(stacks, p6.config.layers), p6).score
    s12 = forward(stacks, p12).score
    score_err = float(np.max(np.abs(s6 - s12)))
    ok = steps == 200 and sums_err < 1e-9 and fused_err < 1e-6 and score_err < 1e-6
    record("c2 fusion invariants", ok,
           f"{steps} steps, max |sum(w)-1| {sums_err:.1e} (<1e-9); restricted vs pinned-12: "
           f"fused {fused_err:.1e}, score {score_err:.1e} (<1e-6)")


# 3 ---------------------------------------------------------------------------

def test_c3_eer_oracle_equivalence():
    worst = 0.0
    for i in range(1000):
        r = make_rng(31337, i)
        n = int(r.integers(2, 51))
        scores = np.round(r.normal(size=n), int(r.integers(0, 3)))   # coarse rounding makes ties
        labels = r.integers(0, 2, n)
        labels[r.choice(n, 2, replace=False)] = [1, 0]
        worst = max(worst, abs(compute_eer(scores, labels).eer - eer_oracle(scores, labels).eer))
    worked = [
        compute_eer([0.9, 0.8, 0.2, 0.1], [1, 1, 0, 0]).eer,
        compute_eer([0.9, 0.8, 0.3, 0.7, 0.2, 0.1], [1, 1, 1, 0, 0, 0]).eer,
        compute_eer([0.4] * 5, [1, 1, 0, 0, 0]).eer,
    ]
    ok = worst < 1e-9 and worked == [0.0, 1 / 3, 0.5]
    record("c3 EER oracle equivalence", ok,
           f"1000 random sets, max |compute-oracle| {worst:.1e} (<1e-9); worked examples {worked}")


# 4 ---------------------------------------------------------------------------

def test_c4_pipeline_shape_contract(tmp_path):
    r = make_rng(404)
    rates = (8000, 16000, 22050, 44100, 48000)
    shapes_ok = 0
    paths = []
    for i in range(100):
        rate = int(rates[r.integers(0, len(rates))])
        n = int(r.uniform(2.0, 12.0) * rate)
        x = r.uniform(-0.5, 0.5, size=(n, 2) if r.random() < 0.5 else n)
        path = tmp_path / f"c{i}.wav"
        write_wav(path, AudioClip(x, rate), float32=bool(r.random() < 0.5))
        paths.append(path)
    clips = []
    for i, path in enumerate(paths):
        clip = resample(to_mono(read_wav(path)), 16000)
        clips.append(fit_duration(clip, make_rng(404, 1, i)))
    stats = compute_global_stats(logmel(c) for c in clips[:10])
    for clip in clips:
        mel = fit_frames(normalize(logmel(clip), stats))
        shapes_ok += len(clip) == TARGET_LENGTH and mel.frames.shape == (1024, 128)
    ten = logmel(AudioClip(r.uniform(-0.5, 0.5, 160000), 16000)).frames.shape[0]
    record("c4 pipeline shape contract", shapes_ok == 100 and ten == 998,
           f"{shapes_ok}/100 clips -> 160000 samples and 1024x128; 10 s clip -> {ten} frames (998)")


# 5 ---------------------------------------------------------------------------

def test_c5_class_weighting():
    manifest = [Entry(f"b{i}", "x", "bona") for i in range(27811)] + \
               [Entry(f"s{i}", "x", "spoof") for i in range(111244)]
    w = auto_class_weights(manifest)
    ratio = w.w_bona / w.w_spoof

    tr, dev = toy_entries(10, 40, "train"), toy_entries(4, 12, "dev")
    src = ToyStacks(tr + dev, seed=9)
    auto = auto_class_weights(tr)
    common = dict(hidden=8, attn=4, batch_size=8, max_steps=50, eval_every=10, seed=11,
                  lr=1e-3, dtype="float64", class_weighting="explicit")
    a = train(tr, dev, src, TrainConfig(w_bona=auto.w_bona, w_spoof=auto.w_spoof, **common))
    b = train(tr, dev, src, TrainConfig(w_bona=10 * auto.w_bona, w_spoof=10 * auto.w_spoof, **common))
    same = (a.metrics_text() == b.metrics_text()
            and a.trajectory.tobytes() == b.trajectory.tobytes()
            and all(a.final.tensors[k].tobytes() == b.final.tensors[k].tobytes() for k in a.final.tensors))
    loss, _ = weighted_loss(np.zeros((32, 2)), ["bona"] * 7 + ["spoof"] * 25, w)
    loss_err = abs(loss - math.log(2))
    record("c5 class weighting", ratio == 4.0 and same and loss_err < 1e-12,
           f"auto ratio {ratio!r} (==4.0); x10 weights 50-step float64 run bitwise equal: {same}; "
           f"|uniform loss - ln2| {loss_err:.1e} (<1e-12)")


# 6 and 7 ---------------------------------------------------------------------

def _audio_source(manifest_path, entries, stats):
    paths = {e.trial_id: resolve(manifest_path, e.path) for e in entries}
    return AudioStacks(paths, stats, EncoderSpec(kind="stub", dim=32, seed=0))


@pytest.fixture(scope="module")
def track1(tmp_path_factory):
    root = tmp_path_factory.mktemp("track1")
    start = time.perf_counter()
    entries = gen_synthetic_corpus(1, 200, 800, root)
    manifest = root / "manifest.tsv"
    tr, dev = select(entries, "train"), select(entries, "dev")
    stats = compute_global_stats(
        (logmel(fit_duration(resample(to_mono(read_wav(resolve(manifest, e.path)))))) for e in tr),
        source="track1:train")
    cfg = TrainConfig(lr=1e-4, batch_size=32, dropout=0.1, max_steps=500, eval_every=25,
                      hidden=32, attn=16, seed=1)
    result = train(tr, dev, _audio_source(manifest, tr + dev, stats), cfg, out_dir=root / "run")
    elapsed = time.perf_counter() - start
    return root, stats, result, elapsed


@pytest.mark.slow
def test_c6_end_to_end_synthetic_detection(track1):
    root, _, result, elapsed = track1
    traj = result.trajectory
    moved = float(np.max(np.abs(traj - 1 / 6)))
    nonconstant = float(np.max(np.ptp(traj, axis=0)))
    ok = result.best_eer <= 0.05 and elapsed < 300 and nonconstant > 0 and moved > 0
    record("c6 end-to-end synthetic detection", ok,
           f"best dev EER {result.best_eer:.4f} (<=0.05) at step {result.best_step}/500, "
           f"{elapsed:.0f}s (<300s); fusion weights max |w-1/6| {moved:.2e}, final "
           + ",".join(f"{w:.4f}" for w in traj[-1]))


@pytest.mark.slow
def test_c7_finetune_flow(track1, tmp_path):
    root, stats, _, _ = track1
    base = load_checkpoint(root / "run" / "best.ckpt").params
    entries = gen_synthetic_corpus(2, 100, 400, tmp_path / "track2", shift="domain2")
    manifest = tmp_path / "track2" / "manifest.tsv"
    tr, dev = select(entries, "train"), select(entries, "dev")
    src = _audio_source(manifest, tr + dev, stats)
    zero_shot = compute_eer([s for _, s in score_manifest(dev, base, src)], [e.is_bona for e in dev]).eer

    cfg = TrainConfig(batch_size=32, dropout=0.1, max_steps=200, eval_every=25, seed=1)
    tuned = finetune(base, tr, dev, src, cfg)
    final_eer = tuned.metrics[-1][2]
    same = finetune(base, tr, dev, src, TrainConfig(max_steps=0, seed=1))
    save_checkpoint(same.best, tmp_path / "zero.ckpt")
    reloaded = load_checkpoint(tmp_path / "zero.ckpt").params
    bitwise = all(reloaded.tensors[k].tobytes() == v.tobytes() for k, v in base.tensors.items())
    ok = cfg.finetune_lr == 5e-5 and tuned.best_eer <= zero_shot and bitwise
    record("c7 fine-tuning flow", ok,
           f"lr {cfg.finetune_lr:g}; dev EER zero-shot {zero_shot:.4f} -> selected {tuned.best_eer:.4f} "
           f"(step {tuned.best_step}), after 200 steps {final_eer:.4f}; 0-step bitwise: {bitwise}")


# 8 ---------------------------------------------------------------------------

def _snapshot(root):
    return {str(p.relative_to(root)): hashlib.sha256(p.read_bytes()).hexdigest()
            for p in sorted(root.rglob("*")) if p.is_file()}


def test_c8_determinism_and_formats(tmp_path):
    r = str(tmp_path)
    (tmp_path / "c.cfg").write_text(
        f"manifest={r}/corp/manifest.tsv\nembeddings={r}/emb/index.tsv\n"
        "hidden=8\nattn=4\nmax_steps=8\neval_every=4\nbatch_size=4\n")
    commands = [
        ["synth-data", "--out", f"{r}/corp", "--seed", "8", "--n-bona", "3", "--n-spoof", "6",
         "--fractions", "0.34,0.33,0.33"],
        ["extract", "--manifest", f"{r}/corp/manifest.tsv", "--out", f"{r}/feats"],
        ["stats", "--manifest", f"{r}/corp/manifest.tsv", "--features", f"{r}/feats/index.tsv",
         "--out", f"{r}/stats.txt"],
        ["encode", "--manifest", f"{r}/corp/manifest.tsv", "--features", f"{r}/feats/index.tsv",
         "--stats", f"{r}/stats.txt", "--out", f"{r}/emb", "--dim", "8"],
        ["encode", "--manifest", f"{r}/corp/manifest.tsv", "--kind", "file", "--source-dir",
         f"{r}/emb", "--out", f"{r}/emb_ext"],
        ["train", "--config", f"{r}/c.cfg", "--seed", "7", "--out", f"{r}/run"],
        ["finetune", "--config", f"{r}/c.cfg", "--checkpoint", f"{r}/run/best.ckpt", "--out", f"{r}/ft"],
        ["score", "--manifest", f"{r}/corp/manifest.tsv", "--checkpoint", f"{r}/run/best.ckpt",
         "--embeddings", f"{r}/emb/index.tsv", "--out", f"{r}/scores.tsv"],
        ["eval-eer", "--scores", f"{r}/scores.tsv", "--labels", f"{r}/corp/manifest.tsv",
         "--out", f"{r}/eer.txt"],
        ["fusion-weights", "--checkpoint", f"{r}/run/best.ckpt", "--out", f"{r}/fusion.csv"],
    ]
    identical = []
    for cmd in commands:
        assert main(cmd) == 0, cmd
        before = _snapshot(tmp_path)
        assert main(cmd) == 0, cmd
        identical.append(_snapshot(tmp_path) == before)

    stack = read_layerstack(next((tmp_path / "emb").glob("*.lstk")))
    write_layerstack(stack, tmp_path / "copy.lstk")
    lstk_ok = read_layerstack(tmp_path / "copy.lstk").layers.tobytes() == stack.layers.tobytes()
    ckpt = load_checkpoint(tmp_path / "run" / "best.ckpt")
    save_checkpoint(ckpt, tmp_path / "copy.ckpt")
    ckpt_ok = (tmp_path / "copy.ckpt").read_bytes() == (tmp_path / "run" / "best.ckpt").read_bytes()

    rejected = 0
    for name, reader in (("copy.lstk", read_layerstack), ("copy.ckpt", load_checkpoint)):
        raw = (tmp_path / name).read_bytes()
        (tmp_path / ("bad_" + name)).write_bytes(b"JUNK" + raw[4:])
        try:
            reader(tmp_path / ("bad_" + name))
        except FormatError:
            rejected += 1
    ok = all(identical) and lstk_ok and ckpt_ok and rejected == 2
    record("c8 determinism and formats", ok,
           f"{sum(identical)}/{len(identical)} subcommands byte-identical on rerun; layerstack "
           f"round-trip {lstk_ok}, checkpoint round-trip {ckpt_ok}; corrupted headers rejected {rejected}/2")
