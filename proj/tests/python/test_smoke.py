"""Smoke tests for the triplex_core extension module."""

import math
import os
import subprocess
import tempfile

import numpy as np
import pytest

import triplex_core as tc


def test_lr_schedule_step_decay():
    assert tc.lr_schedule(0) == 1e-4
    assert tc.lr_schedule(49) == 1e-4
    assert tc.lr_schedule(50) == 9e-5
    assert tc.lr_schedule(100) == 8.1e-5
    assert tc.lr_schedule(10, lr0=0.5, step_size=5, gamma=0.5) == 0.5 * 0.25


def test_fusion_loss_hand_example():
    out = tc.fusion_loss([1.0, 0.0], [1.0, 0.0], [1.0, 0.0], [1.0, 1.0], [0.0, 0.0], 0.5)
    assert out["l_ta"] == pytest.approx(0.5)
    assert out["l_f"] == pytest.approx(1.0)
    assert out["total"] == pytest.approx(out["l_ta"] + out["l_ne"] + out["l_gl"] + out["l_f"])
    with pytest.raises(ValueError):
        tc.fusion_loss([0.0], [0.0], [0.0], [0.0], [0.0], 1.5)


def test_pcc_and_slide_metrics():
    rng = np.random.default_rng(3)
    truth = rng.normal(size=(40, 6))
    assert tc.pcc_per_gene(truth, truth) == pytest.approx([1.0] * 6)
    pred = truth + 1.0
    metrics = tc.slide_metrics(pred, truth)
    assert metrics["mse"] == pytest.approx(1.0)
    assert metrics["mae"] == pytest.approx(1.0)

    # zero-variance gene flagged as NaN
    flat = np.copy(truth)
    flat[:, 2] = 5.0
    pcc = tc.pcc_per_gene(flat, truth)
    assert math.isnan(pcc[2])


def test_fold_builders_do_not_leak_patients():
    slides = [(f"p{p}s{s}", f"p{p}") for p in range(5) for s in range(2)]
    folds = tc.lopcv_folds(slides)
    assert len(folds) == 5
    patient_of = dict(slides)
    for fold in folds:
        test_patients = {patient_of[s] for s in fold["test_slides"]}
        train_patients = {patient_of[s] for s in fold["train_slides"]}
        assert not (test_patients & train_patients)
    k2 = tc.grouped_kfold(slides, 2)
    assert len(k2) == 2
    covered = sorted(s for fold in k2 for s in fold["test_slides"])
    assert covered == sorted(s for s, _ in slides)


def test_apeg_zero_kernel_is_identity():
    rng = np.random.default_rng(4)
    tokens = rng.normal(size=(5, 3))
    out = tc.apeg(tokens, [0, 0, 1, 2, 2], [0, 2, 1, 0, 2], np.zeros((3, 3, 3)))
    assert np.array_equal(out, tokens)
    # a single centered token only sees the kernel center
    kern = rng.normal(size=(3, 3, 3))
    one = rng.normal(size=(1, 3))
    got = tc.apeg(one, [1], [1], kern)
    want = one + one * kern[:, 1, 1]
    assert np.allclose(got, want, atol=1e-12)


def test_feature_file_round_trip(tmp_path):
    rng = np.random.default_rng(5)
    arr = rng.normal(size=(4, 25, 512)).astype(np.float32)
    path = str(tmp_path / "f.bin")
    tc.write_features(path, arr)
    back = tc.read_features(path)
    assert back.shape == arr.shape
    assert np.array_equal(back, arr)


def test_synth_and_tiny_cv(tmp_path):
    out = str(tmp_path / "data")
    tc.synth(out, patients=3, slides=1, grid=3, genes=4, seed=11)
    assert os.path.exists(os.path.join(out, "labels.csv"))
    res = tc.cv(
        os.path.join(out, "run.cfg"),
        {
            "model.d": "8",
            "train.max_epochs": "2",
            "train.patience": "2",
            "paths.out_dir": str(tmp_path / "cv_out"),
        },
    )
    assert res["folds"] == 3
    assert -1.0 <= res["pcc_m"] <= 1.0
    assert os.path.exists(str(tmp_path / "cv_out" / "summary.txt"))


def test_cli_binary_runs_when_available():
    cli = os.environ.get("TRIPLEX_CLI")
    if not cli:
        pytest.skip("TRIPLEX_CLI not set")
    with tempfile.TemporaryDirectory() as tmp:
        proc = subprocess.run([cli, "synth", "--out", tmp, "--patients", "2", "--grid", "2",
                               "--genes", "3"], capture_output=True)
        assert proc.returncode == 0
        assert os.path.exists(os.path.join(tmp, "spots.csv"))
