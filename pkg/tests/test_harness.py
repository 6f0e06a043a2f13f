"""Config, training loop, ablation bookkeeping, plotting and the CLI at toy size."""

import csv
import json
import math

import numpy as np
import pytest
import torch
from PIL import Image

from rpl_ood import training
from rpl_ood.ablation import (
    Arm,
    anchor_set_arms,
    depth_arms,
    projector_arms,
    run_suite,
    summarise,
    loss_toggle_arms,
    write_runs,
    write_table,
)
from rpl_ood.cli import EXIT_CONFIG, EXIT_INVARIANT, EXIT_OK, main
from rpl_ood.config import ExperimentConfig, load_config, parse_overrides, read_ini, write_ini
from rpl_ood.errors import ConfigError, InvariantViolation, TrainingError
from rpl_ood.plotting import energy_histogram, heatmap_rgb, plot_energy_histograms, plot_metric_bars, save_heatmap
from rpl_ood.segnet import PretrainConfig, build_segnet, pretrain_segnet, save_segnet
from rpl_ood.synthdata import DatasetConfig, generate_all, write_dataset
from rpl_ood.training import TrainConfig, evaluate, poly_lr, replay, train_rpl

from conftest import tiny_arch

TINY_DATA = dict(image_size=40, crop_size=32, n_train=8, n_val=3, n_outlier_train=6, n_outlier_val=3)
TINY_TRAIN = dict(steps=6, batch_size=2, sampling={"budget": 16})


@pytest.fixture(scope="module")
def toy():
    dcfg = DatasetConfig(**TINY_DATA)
    data = generate_all(dcfg)
    seg, _ = pretrain_segnet(build_segnet(tiny_arch()), data["inlier_train"], PretrainConfig(steps=5, batch_size=2), 32)
    return dcfg, data, seg


def tcfg(**kw):
    d = {**TINY_TRAIN, **kw}
    return TrainConfig.from_dict(d)


# --- config -------------------------------------------------------------------

def test_reference_hyperparameters_are_defaults():
    cfg = TrainConfig()
    assert (cfg.loss.alpha, cfg.loss.tau, cfg.loss.t) == (0.05, 0.10, 1.0)
    assert cfg.head_lr_multiplier == 10 and cfg.poly_power == 0.9 and cfg.steps == 2000 and cfg.batch_size == 8
    assert cfg.sampling.budget == 512
    assert (cfg.smooth.kernel_size, cfg.smooth.sigma) == (7, 1.0)


def test_ini_round_trip(tmp_path):
    cfg = ExperimentConfig(train=tcfg(lr=0.02))
    path = write_ini(cfg, tmp_path / "exp.ini")
    assert load_config(path) == cfg


def test_flags_override_file(tmp_path):
    (tmp_path / "a.ini").write_text("[train]\nlr = 0.5\nsteps = 7\n[train.loss]\nalpha = 0.2\n")
    cfg = load_config(tmp_path / "a.ini", parse_overrides(["train.lr=0.25", "train.loss.tau=0.3"]))
    assert cfg.train.lr == 0.25 and cfg.train.steps == 7
    assert cfg.train.loss.alpha == 0.2 and cfg.train.loss.tau == 0.3


@pytest.mark.parametrize(
    "text",
    ["[bogus]\nx = 1\n", "[train]\nno_such_key = 1\n", "[train]\nlr = -1\n", "[dataset]\ncrop_size = 8\n", "[train.loss]\nt = 0\n"],
)
def test_bad_config_files(tmp_path, text):
    (tmp_path / "bad.ini").write_text(text)
    with pytest.raises(ConfigError):
        load_config(tmp_path / "bad.ini")


def test_bad_overrides():
    with pytest.raises(ConfigError):
        parse_overrides(["lr=1"])
    with pytest.raises(ConfigError):
        parse_overrides(["train.lr"])
    with pytest.raises(ConfigError):
        read_ini("/nonexistent/exp.ini")


def test_pe_and_hinge_are_exclusive():
    with pytest.raises(ConfigError):
        TrainConfig(use_hinge=True).validate()


# --- training -----------------------------------------------------------------

def test_poly_schedule_endpoint(toy):
    dcfg, data, seg = toy
    rec = train_rpl(seg, data, dcfg, tcfg(lr=0.04), evaluate_splits=False)
    assert rec.log[-1]["lr"] == pytest.approx(0.04 * (1 / 6) ** 0.9, rel=1e-12)
    assert rec.log[0]["lr"] == 0.04
    assert poly_lr(1.0, 3, 6, 0.9) == pytest.approx(0.5**0.9)


def test_objective_matches_logged_terms(toy):
    dcfg, data, seg = toy
    rec = train_rpl(seg, data, dcfg, tcfg(), evaluate_splits=False)
    for e in rec.log:
        assert abs(e["total"] - (e["l_rpl"] + e["l_corocl"])) <= 1e-6
        assert abs(e["l_rpl"] - (e["l_in"] + 0.05 * e["l_out"])) <= 1e-6
        assert e["n_inlier"] + e["n_outlier"] == 2 * 32 * 32
        assert "cells" in e


def test_frozen_checksum_constant_and_class_maps_unchanged(toy):
    dcfg, data, seg = toy
    before = seg.compute_checksum()
    maps_before = training.closed_set_maps(seg, data["inlier_val"])
    rec = train_rpl(seg, data, dcfg, tcfg())
    assert seg.compute_checksum() == before == seg.checksum
    for a, b in zip(maps_before, training.closed_set_maps(seg, data["inlier_val"])):
        np.testing.assert_array_equal(a, b)
    frozen = evaluate(seg, None, data, dcfg)
    assert rec.metrics["oe_val"]["miou"] == frozen.report.miou


def test_runs_are_reproducible(toy, tmp_path):
    dcfg, data, seg = toy
    a = train_rpl(seg, data, dcfg, tcfg(seed=3), run_dir=tmp_path / "a")
    b = replay(seg, data, training.load_run_config(tmp_path / "a"))
    assert a.metrics == b.metrics
    assert json.loads((tmp_path / "a" / "metrics.json").read_text()) == json.loads(json.dumps(a.metrics))
    assert (tmp_path / "a" / "rpl.npz").is_file() and (tmp_path / "a" / "train_log.jsonl").is_file()


def test_replay_refuses_other_segnet(toy, tmp_path):
    dcfg, data, seg = toy
    train_rpl(seg, data, dcfg, tcfg(steps=1), run_dir=tmp_path / "r")
    other = build_segnet(tiny_arch(seed=9)).freeze()
    with pytest.raises(ConfigError):
        replay(other, data, training.load_run_config(tmp_path / "r"))


def test_unfrozen_segnet_rejected(toy):
    dcfg, data, _ = toy
    with pytest.raises(InvariantViolation):
        train_rpl(build_segnet(tiny_arch()), data, dcfg, tcfg())


def test_checksum_drift_is_fatal(toy, monkeypatch):
    dcfg, data, seg = toy
    seg = build_segnet(tiny_arch()).freeze()
    real = training.forward_closed_set

    def tampering(net, x):
        out = real(net, x)
        with torch.no_grad():
            next(net.parameters()).add_(1e-3)
        return out

    monkeypatch.setattr(training, "forward_closed_set", tampering)
    with pytest.raises(InvariantViolation):
        train_rpl(seg, data, dcfg, tcfg())


def test_nan_loss_aborts(toy, monkeypatch):
    dcfg, data, seg = toy

    def nan_loss(*a, **k):
        v = torch.tensor(float("nan"), requires_grad=True)
        return {"l_in": v, "l_out": v, "l_rpl": v}

    monkeypatch.setattr(training, "rpl_loss", nan_loss)
    with pytest.raises(TrainingError):
        train_rpl(seg, data, dcfg, tcfg())


def test_run_directory_lock(toy, tmp_path):
    dcfg, data, seg = toy
    (tmp_path / "busy").mkdir()
    (tmp_path / "busy" / ".lock").write_text("123")
    with pytest.raises(ConfigError):
        train_rpl(seg, data, dcfg, tcfg(), run_dir=tmp_path / "busy")


def test_empty_split_rejected(toy):
    dcfg, data, seg = toy
    with pytest.raises(ConfigError):
        evaluate(seg, None, {**data, "oe_val": []}, dcfg)


# --- ablation -----------------------------------------------------------------

def test_suite_shapes():
    names = [a.name for a in loss_toggle_arms()]
    assert names == ["frozen-energy", "hinge", "PE", "PE+DS", "PE+DS+CoroCL", "direct(PE)"]
    assert len(anchor_set_arms()) == 5
    assert [a.name for a in depth_arms()] == ["R=16", "R=32", "R=48", "R=64"]
    assert len(projector_arms()) == 3


def test_suite_shares_seeds_and_annotates_failures(toy, tmp_path):
    dcfg, data, seg = toy
    arms = [
        Arm("frozen", trained=False),
        Arm("PE", {"use_corocl": False}),
        Arm("broken", {"use_hinge": True}),  # conflicts with the PE default
    ]
    runs = run_suite(seg, data, dcfg, tcfg(), arms, seeds=[0, 1], out_dir=tmp_path)
    assert [(r.arm, r.seed) for r in runs] == [(a.name, s) for a in arms for s in (0, 1)]
    broken = [r for r in runs if r.arm == "broken"]
    assert all(not r.ok and "ConfigError" in r.error for r in broken)
    rows = summarise(runs, [a.name for a in arms])
    assert rows[2]["n_ok"] == 0 and rows[2]["auroc"] is None and rows[2]["errors"]
    pe = [r.metrics["auroc"] for r in runs if r.arm == "PE"]
    assert rows[1]["auroc"] == pytest.approx(float(np.median(pe)))
    path = write_table(rows, tmp_path / "t.csv")
    table = list(csv.DictReader(open(path)))
    assert [r["name"] for r in table] == ["frozen", "PE", "broken"]
    assert list(table[0])[:6] == ["name", "n_seeds", "n_ok", "fpr95", "auprc", "auroc"]
    lines = write_runs(runs, tmp_path / "runs.jsonl").read_text().splitlines()
    assert len(lines) == 6


# --- plotting -----------------------------------------------------------------

def test_histogram_counts_cover_all_pixels():
    rng = np.random.default_rng(0)
    inl, out = rng.normal(-5, 1, 1000), rng.normal(0, 2, 137)
    h = energy_histogram(inl, out, bins=25)
    assert h.inlier_counts.sum() == 1000 and h.outlier_counts.sum() == 137 and h.total == 1137
    same = energy_histogram(np.zeros(4), np.zeros(2))
    assert same.total == 6


def test_heatmap_dimensions(tmp_path):
    scores = np.random.default_rng(1).normal(size=(23, 37))
    assert heatmap_rgb(scores).shape == (23, 37, 3)
    assert Image.open(save_heatmap(scores, tmp_path / "h.png")).size == (37, 23)


def test_figures_written(tmp_path):
    rng = np.random.default_rng(2)
    hists = plot_energy_histograms({"PE": (rng.normal(size=50), rng.normal(size=20))}, tmp_path / "e.png")
    assert hists["PE"].total == 70 and (tmp_path / "e.png").stat().st_size > 0
    plot_metric_bars([{"name": "a", "auroc": 0.5}, {"name": "b", "auroc": None}], "auroc", tmp_path / "b.png")
    assert (tmp_path / "b.png").is_file()


# --- CLI ----------------------------------------------------------------------

@pytest.fixture(scope="module")
def cli_root(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    arch = tiny_arch()
    ini = ExperimentConfig(
        dataset=DatasetConfig(**TINY_DATA),
        arch=arch,
        pretrain=PretrainConfig(steps=4, batch_size=2),
        train=tcfg(),
    )
    write_ini(ini, root / "exp.ini")
    return root


def run_cli(root, monkeypatch, *argv):
    monkeypatch.setenv("RPL_OUTPUT_ROOT", str(root))
    return main(list(argv))


def test_cli_pipeline(cli_root, monkeypatch, capsys):
    ini = str(cli_root / "exp.ini")
    assert run_cli(cli_root, monkeypatch, "gen-data", "--config", ini, "--out", "data") == EXIT_OK
    assert (cli_root / "data" / "manifest.json").is_file()
    assert run_cli(cli_root, monkeypatch, "train-seg", "--config", ini) == EXIT_OK
    capsys.readouterr()
    assert run_cli(cli_root, monkeypatch, "train-rpl", "--config", ini, "--steps", "3", "--run-dir", "runs/a") == EXIT_OK
    out = capsys.readouterr().out.splitlines()
    assert out[0] == "split,fpr95,auprc,auroc,f1_star,miou,n_pixels,n_outlier"
    cfg = json.loads((cli_root / "runs" / "a" / "config.json").read_text())
    assert cfg["train"]["steps"] == 3  # flag beat the file's 6

    assert run_cli(cli_root, monkeypatch, "replay", "--run-dir", "runs/a") == EXIT_OK
    assert run_cli(cli_root, monkeypatch, "eval", "--rpl", "runs/a/rpl.npz", "--out", "eval.csv") == EXIT_OK
    assert (cli_root / "eval.csv").read_text().startswith("split,fpr95,auprc,auroc")

    img = cli_root / "in.png"
    Image.fromarray(np.zeros((32, 32, 3), dtype=np.uint8)).save(img)
    assert run_cli(cli_root, monkeypatch, "predict", str(img), "--rpl", "runs/a/rpl.npz", "--out", "pred") == EXIT_OK
    assert (cli_root / "pred" / "in_scores.npy").is_file()

    assert run_cli(cli_root, monkeypatch, "plot", "--rpl", "runs/a/rpl.npz", "-n", "2", "--out", "fig") == EXIT_OK
    assert Image.open(cli_root / "fig" / "heatmap_000.png").size == (40, 40)
    rows = list(csv.DictReader(open(cli_root / "fig" / "energy_hist.csv")))
    n_pix = 3 * 40 * 40
    assert sum(int(r["inlier_count"]) + int(r["outlier_count"]) for r in rows) == n_pix

    assert run_cli(
        cli_root, monkeypatch, "ablate", "--config", ini, "--suite", "loss-toggles", "--seeds", "0", "--steps", "2", "--out", "abl"
    ) == EXIT_OK
    table = list(csv.DictReader(open(cli_root / "abl" / "loss-toggles.csv")))
    assert len(table) == 6
    assert (cli_root / "abl" / "energy_hist_pe_vs_hinge.png").is_file()

    # tampered metrics make the replay disagree: invariant violation
    metrics = cli_root / "runs" / "a" / "metrics.json"
    d = json.loads(metrics.read_text())
    d["oe_val"]["auroc"] = -1.0
    metrics.write_text(json.dumps(d))
    assert run_cli(cli_root, monkeypatch, "replay", "--run-dir", "runs/a") == EXIT_INVARIANT


def test_cli_config_errors(cli_root, monkeypatch, tmp_path):
    assert run_cli(tmp_path, monkeypatch, "train-seg", "--data", "missing") == EXIT_CONFIG
    assert run_cli(tmp_path, monkeypatch, "gen-data", "--set", "dataset.crop_size=8") == EXIT_CONFIG
    (tmp_path / "bad.ini").write_text("[nope]\n")
    assert run_cli(tmp_path, monkeypatch, "gen-data", "--config", str(tmp_path / "bad.ini")) == EXIT_CONFIG
    with pytest.raises(SystemExit) as exc:
        main(["train-rpl", "--lr", "abc"])
    assert exc.value.code == 2
