"""Acceptance criteria, one test per criterion.

Each test records a ``PASS``/``FAIL`` line, printed immediately and again in
the pytest terminal summary. Run alone with::

    pytest tests/test_acceptance.py -v
"""
import csv
import json
import math
import struct
import time

import numpy as np
import pytest

from svsec import tensor_core as tc
from svsec.cli import ABLATION_ROWS, main
from svsec.data import ImageSet, scan_dataset, stratified_split
from svsec.errors import BadMagicError, CheckpointError, TruncatedCheckpointError, VersionMismatchError
from svsec.metrics import PredictionSet, auc_ovr_macro, binary_auc
from svsec.model import (ModelConfig, SVSECModel, cross_entropy, load_checkpoint, reduced_config, save_checkpoint,
                         scorer_config)
from svsec.nn_layers import Conv2dLayer, LinearLayer, conv2d, linear, maxpool2d
from svsec.saliency import ScaledScorer, compute_saliency, map_pyramid
from svsec.swin import SwinBlock, SwinBranch, SwinConfig, shifted_window_mask
from svsec.synthetic import make_arrays, write_dataset
from svsec.tensor_core import Rng, Tensor, grad_check, precision
from svsec.train import SaliencyCache, TrainHyper, default_scorer, train

from conftest import ACCEPTANCE_LINES
from oracles import auc_pairs, conv2d_loops, dense_swin_block, macro_auc_pairs, region_mask


def record(name, checks):
    """``checks`` maps a short description to a bool; all must hold."""
    failed = [k for k, ok in checks.items() if not ok]
    line = f"{'PASS' if not failed else 'FAIL'}  {name}"
    if failed:
        line += "  (failed: " + "; ".join(failed) + ")"
    print(line)
    ACCEPTANCE_LINES.append(line)
    assert not failed, line


# ---------------------------------------------------------------------------
# 1. gradient correctness


def _per_op_checks():
    rng = np.random.default_rng(0)
    t = lambda a: Tensor(np.asarray(a, dtype=np.float64))  # noqa: E731
    conv = Conv2dLayer(t(rng.normal(size=(3, 2, 3, 3))), t(rng.normal(size=3)), 1, 1)
    lin = LinearLayer(t(rng.normal(size=(4, 6))), t(rng.normal(size=4)))
    w = rng.normal(size=(5, 5))
    blk = SwinBlock(SwinConfig(embed_dim=8, num_heads=2, window_size=2, shift=1, input_side=96), shifted=True)
    blk.init(Rng(1))
    for p in blk.parameters().values():
        p.data = p.data.astype(np.float64)
    pool_in = rng.permutation(64).reshape(1, 1, 8, 8) / 10.0
    cases = {
        "conv2d": ((1, 2, 5, 5), lambda x: tc.tsum(tc.mul(conv2d(x, conv), conv2d(x, conv)))),
        "maxpool": (pool_in, lambda x: tc.tsum(tc.mul(maxpool2d(x), maxpool2d(x)))),
        "linear": ((3, 6), lambda x: tc.tsum(tc.mul(linear(x, lin), linear(x, lin)))),
        "matmul": ((4, 5), lambda x: tc.tsum(tc.softmax(tc.matmul(x, t(w)), -1) * 2.0)),
        "layer_norm": ((3, 8), lambda x: tc.tsum(tc.mul(tc.layer_norm(x, t(np.linspace(.5, 2, 8)),
                                                                         t(np.zeros(8))), x))),
        "gelu": ((4, 5), lambda x: tc.tsum(tc.mul(tc.gelu(x), x))),
        "log_softmax": ((3, 6), lambda x: tc.tsum(tc.mul(tc.log_softmax(x), tc.softmax(x)))),
        "swin_block_shifted": ((1, 4, 4, 8), lambda x: tc.tsum(tc.mul(blk(x), blk(x)))),
        "cross_entropy": ((4, 5), lambda x: cross_entropy(x, [0, 2, 4, 1])),
    }
    worst = {}
    for name, (shape, f) in cases.items():
        x = t(shape) if isinstance(shape, np.ndarray) else t(rng.normal(size=shape))
        worst[name] = grad_check(f, x, h=1e-3, tol=1e-3).max_rel_error
    return worst


def test_criterion_1_gradient_correctness():
    t0 = time.perf_counter()
    with precision(np.float64):
        per_op = _per_op_checks()
        cfg = reduced_config(num_classes=4, side=96, seed=0)
        model = SVSECModel(cfg)
        params = model.parameters()
        for p in params.values():
            p.data = p.data.astype(np.float64)
        rng = np.random.default_rng(0)
        images = rng.random((2, 3, 96, 96))
        maps = rng.random((2, 1, 48, 48))
        labels = [1, 3]
        # h=1e-6: the ReLU / max-pool kinks of the CNN branch sit closer than 1e-3 to some sample points
        rep = grad_check(lambda: cross_entropy(model(images, maps), labels),
                         [params[k] for k in sorted(params)], h=1e-6, tol=2e-3, coords=150)
    elapsed = time.perf_counter() - t0
    detail = ", ".join(f"{k} {v:.1e}" for k, v in per_op.items())
    print(f"  per-op max rel err: {detail}")
    print(f"  end-to-end: {rep.checked} coords, max rel err {rep.max_rel_error:.2e}, {elapsed:.1f}s")
    record("C1 gradient correctness", {
        "per-op <= 1e-3": max(per_op.values()) <= 1e-3,
        "end-to-end <= 2e-3": rep.max_rel_error <= 2e-3,
        ">= 100 coords": rep.checked >= 100,
        "< 5 min": elapsed < 300,
    })


# ---------------------------------------------------------------------------
# 2. oracle equivalences


def test_criterion_2_oracle_equivalences():
    conv_err, attn_err, auc_ok = [], [], []
    for seed in range(20):
        r = np.random.default_rng(seed)
        x = r.standard_normal((2, 3, 7, 7)).astype(np.float32)
        w = r.standard_normal((4, 3, 3, 3)).astype(np.float32)
        b = r.standard_normal(4).astype(np.float32)
        stride, pad = (1, 1) if seed % 2 else (2, 0)
        layer = Conv2dLayer(Tensor(w), Tensor(b), stride, pad)
        conv_err.append(np.max(np.abs(conv2d(Tensor(x), layer).data - conv2d_loops(x, w, b, stride, pad))))

        cfg = SwinConfig(embed_dim=8, num_heads=2, window_size=3, shift=0, input_side=144)
        blk = SwinBlock(cfg, shifted=False)
        blk.init(Rng(seed))
        g = r.standard_normal((2, 3, 3, 8)).astype(np.float32)
        ref = dense_swin_block(g, {k: v.data.astype(np.float64) for k, v in blk.parameters().items()}, 2)
        attn_err.append(np.max(np.abs(blk(Tensor(g)).data - ref)))

        n = 40 + seed
        scores = r.integers(0, 7, n) / 7.0
        pos = r.random(n) < 0.4
        pos[:2] = [True, False]
        probs = r.dirichlet(np.ones(4), n).round(2)
        labels = r.integers(0, 4, n)
        auc_ok.append(binary_auc(scores, pos) == auc_pairs(scores, pos)
                      and abs(auc_ovr_macro(PredictionSet(labels, probs)) - macro_auc_pairs(labels, probs)) <= 1e-12)

    mask_cases, mask_ok = 0, True
    for w in range(1, 7):
        for H in range(w, 7, w):
            for W in range(w, 7, w):
                for s in range(1, w):
                    mask_cases += 1
                    mask_ok &= bool(np.array_equal(shifted_window_mask(H, W, w, s), region_mask(H, W, w, s)))
    print(f"  conv max err {max(conv_err):.1e}; W-MSA max err {max(attn_err):.1e}; "
          f"{mask_cases} mask grids; {len(auc_ok)} AUC sets")
    record("C2 oracle equivalences", {
        "conv2d <= 1e-5 on 20 seeds": max(conv_err) <= 1e-5 and len(conv_err) >= 20,
        "single-window W-MSA <= 1e-5 on 20 seeds": max(attn_err) <= 1e-5 and len(attn_err) >= 20,
        "SW-MSA mask exact for all grids <= 6": mask_ok and mask_cases >= 20,
        "AUC exact vs pairwise on 20 seeds": all(auc_ok) and len(auc_ok) >= 20,
    })


# ---------------------------------------------------------------------------
# 3. architecture shape contract


def test_criterion_3_shape_contract():
    cfg = ModelConfig()
    model = SVSECModel(cfg)
    rng = np.random.default_rng(0)
    images = rng.random((2, 3, 448, 448)).astype(np.float32)
    maps = rng.random((2, 1, 224, 224)).astype(np.float32)

    swin_out = SwinBranch(SwinConfig(), Rng(0))(Tensor(rng.random((2, 3, 480, 480)).astype(np.float32)))
    trace = []
    pyramid = map_pyramid(maps, [448, 224, 112, 56])
    cnn_feat = model.cnn.features(Tensor(images), pyramid, trace)
    cnn_out = model.cnn(Tensor(images), pyramid)
    logits = model(images, maps)
    print(f"  swin {swin_out.shape}, cnn feature {cnn_feat.shape}, cnn out {cnn_out.shape}, "
          f"head in {model.head[0].weight.shape[1]}, logits {logits.shape}, trace {trace}")
    record("C3 architecture shape contract", {
        "swin [B,64]": swin_out.shape == (2, 64),
        "cnn pre-head 256": cnn_feat.shape == (2, 256),
        "cnn [B,64]": cnn_out.shape == (2, 64),
        "head consumes 128": model.head[0].weight.shape == (64, 128),
        "logits [B,8]": logits.shape == (2, 8),
        "trace 4,33,65,129": trace == [4, 33, 65, 129],
    })


# ---------------------------------------------------------------------------
# 4. overfit sanity


def test_criterion_4_overfit():
    t0 = time.perf_counter()
    images, labels, ids = make_arrays(num_classes=8, per_class=8, side=96, seed=0)
    ds = ImageSet(labels, ids, images=images)
    cfg = reduced_config(num_classes=8, side=96, seed=0)
    cache = SaliencyCache(default_scorer(cfg))
    cache.warm(ds)
    initial = float(cross_entropy(SVSECModel(cfg)(images, cache.batch(ids, images)), labels).data)

    # validating on the training set makes val accuracy the train accuracy
    result = train(ds, ds, cfg, TrainHyper(epochs=200, batch_size=16, lr=3e-3, seed=0), cache=cache,
                   on_epoch=lambda epoch, model, row: row["val_accuracy"] == 1.0)
    elapsed = time.perf_counter() - t0
    best = max(r["val_accuracy"] for r in result.log)
    print(f"  initial loss {initial:.4f} (ln 8 = {math.log(8):.4f}); train accuracy {best:.3f} "
          f"after {len(result.log)} epochs; {elapsed:.0f}s")
    record("C4 overfit sanity", {
        "initial loss ln 8 +- 0.2": abs(initial - math.log(8)) <= 0.2,
        "100% train accuracy within 200 epochs": best == 1.0,
        "< 10 min": elapsed < 600,
    })


# ---------------------------------------------------------------------------
# 5. ablation harness


def test_criterion_5_ablation(tmp_path):
    data = write_dataset(tmp_path / "data", num_classes=8, per_class=8, side=96, seed=0)
    manifest = tmp_path / "manifest.tsv"
    config = tmp_path / "run.json"
    config.write_text(json.dumps({"preset": "reduced", "train": {"epochs": 3, "batch_size": 16, "lr": 3e-3}}))
    rc_split = main(["split", "--data", str(data), "--out", str(manifest)])
    rc = main(["ablate", "--manifest", str(manifest), "--config", str(config), "--out", str(tmp_path / "ab")])
    rows = list(csv.reader((tmp_path / "ab" / "ablation.csv").open())) if rc == 0 else []
    docs = json.loads((tmp_path / "ab" / "ablation.json").read_text()) if rc == 0 else []
    text = (tmp_path / "ab" / "ablation.txt").read_text() if rc == 0 else ""
    full = load_checkpoint(tmp_path / "ab" / "3_svsec.svse").config if rc == 0 else None
    record("C5 ablation harness", {
        "commands exit 0": rc_split == 0 and rc == 0,
        "csv header": rows[:1] == [["f1", "accuracy", "auc", "recall", "precision"]],
        "four rows": len(rows) == 5 and len(docs) == 4,
        "row labels": [d["method"] for d in docs] == [label for label, _ in ABLATION_ROWS],
        "text header in table order": text.split()[1:6] == ["F1-score", "Accuracy", "AUC", "Recall", "Precision"],
        "SVS-EC has both fusion paths": full is not None and full.variant == "svsec"
        and full.cnn.fuse_input_channel and full.cnn.fuse_per_stage,
    })


# ---------------------------------------------------------------------------
# 6. saliency contract


def test_criterion_6_saliency():
    scorer = default_scorer(ModelConfig())
    image = np.random.default_rng(0).random((1, 3, 448, 448)).astype(np.float32)
    a = compute_saliency(image, scorer, "img").values
    b = compute_saliency(image, scorer, "img").values
    scaled = compute_saliency(image, ScaledScorer(scorer, 7.5), "img").values

    zero = SVSECModel(scorer_config(ModelConfig()))
    for p in zero.parameters().values():
        p.data[...] = 0
    z = compute_saliency(image, zero).values
    print(f"  map {a.shape}, range [{a.min():.3f}, {a.max():.3f}], "
          f"max diff under x7.5 logit scaling {np.max(np.abs(a - scaled)):.1e}")
    record("C6 saliency contract", {
        "224x224": a.shape == (1, 1, 224, 224),
        "range [0,1]": a.min() >= 0 and a.max() <= 1,
        "zero scorer -> zero map": not z.any(),
        "bit-identical reruns": a.tobytes() == b.tobytes(),
        "logit scaling invariant": np.allclose(a, scaled, atol=1e-5),
    })


# ---------------------------------------------------------------------------
# 7. split contract


def test_criterion_7_split(tmp_path):
    for k in range(8):
        d = tmp_path / f"class_{k}"
        d.mkdir()
        for i in range(1000):
            (d / f"{i:04d}.jpg").write_bytes(b"")
    cat = scan_dataset(tmp_path)
    a = stratified_split(cat, seed=0)
    b = stratified_split(cat, seed=0)
    c = stratified_split(cat, seed=1)
    counts = a.counts()
    totals = [sum(counts[s]) for s in ("train", "val", "test")]
    every = [item for s in a.splits.values() for item in s]
    print(f"  totals {totals}; per class {counts['train'][0]}/{counts['val'][0]}/{counts['test'][0]}")
    record("C7 split contract", {
        "8000 items": len(cat) == 8000,
        "4800/2000/1200": totals == [4800, 2000, 1200],
        "600/250/150 per class": counts == {"train": [600] * 8, "val": [250] * 8, "test": [150] * 8},
        "partition": len(set(every)) == 8000 and set(every) == set(cat.items()),
        "deterministic per seed": a.to_text() == b.to_text() and a.to_text() != c.to_text(),
    })


# ---------------------------------------------------------------------------
# 8. checkpoint roundtrip


def _raises(exc_type, path):
    try:
        load_checkpoint(path)
    except exc_type:
        return True
    except CheckpointError:
        return False
    return False


def test_criterion_8_checkpoint(tmp_path):
    cfg = reduced_config(num_classes=4, seed=5)
    model = SVSECModel(cfg)
    rng = np.random.default_rng(0)
    images = rng.random((3, 3, 96, 96)).astype(np.float32)
    maps = rng.random((3, 1, 48, 48)).astype(np.float32)
    path = tmp_path / "m.svse"
    save_checkpoint(path, model, epoch=2)
    raw = path.read_bytes()
    same = load_checkpoint(path).model(images, maps).data.tobytes() == model(images, maps).data.tobytes()

    bad = tmp_path / "bad.svse"
    results = {}
    bad.write_bytes(b"JUNK" + raw[4:])
    results["bad magic"] = _raises(BadMagicError, bad)
    bad.write_bytes(raw[:4] + struct.pack("<I", 2) + raw[8:])
    results["version mismatch"] = _raises(VersionMismatchError, bad)
    bad.write_bytes(raw[:-3])
    results["truncated"] = _raises(TruncatedCheckpointError, bad)
    distinct = len({BadMagicError, VersionMismatchError, TruncatedCheckpointError}) == 3 and not any(
        issubclass(a, b) for a in (BadMagicError, VersionMismatchError, TruncatedCheckpointError)
        for b in (BadMagicError, VersionMismatchError, TruncatedCheckpointError) if a is not b)
    record("C8 checkpoint roundtrip", {
        "bit-exact forward after reload": same,
        **{f"{k} rejected": v for k, v in results.items()},
        "distinct error types": distinct,
    })


if __name__ == "__main__":
    raise SystemExit(pytest.main([__file__, "-v", "-s"]))
