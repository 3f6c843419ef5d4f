import subprocess
import sys

import pytest

from cvsplat import io as uio
from cvsplat.cli import main
from cvsplat.evaluation import ProtocolResult, load_ensemble
from cvsplat.gaussians import load_checkpoint
from cvsplat.scenegen import load_manifest
from cvsplat.trainer import TrainConfig, read_trace
from cvsplat.uncertainty import UncertaintyMap

from conftest import TINY_SPEC

FAST = ["--set", "iterations=12", "--set", "densify_from=4", "--set", "densify_interval=4", "--quiet"]


def run(*argv):
    try:
        return main([str(a) for a in argv])
    except SystemExit as exc:
        return exc.code


@pytest.fixture(scope="module")
def work(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    uio.write_kv(root / "spec.txt", TINY_SPEC)
    assert run("generate-scene", "--spec", root / "spec.txt", "--out", root / "scene", "--points", 600,
               "--quiet") == 0
    return root


def test_generate_scene_writes_loadable_manifest(work):
    m = load_manifest(work / "scene" / "manifest.txt")
    assert m.spec.width == 48 and len(m.split("aerial-train")) == 8
    assert len(m.points()[0]) == 600
    assert m.views[0].image().shape == (24, 48, 3)


def test_seed_twice_gives_identical_artifacts(work, tmp_path):
    for d in ("a", "b"):
        assert run("generate-scene", "--spec", work / "spec.txt", "--seed", 7, "--out", tmp_path / d,
                   "--points", 200, "--quiet") == 0
    a = sorted(p for p in (tmp_path / "a").rglob("*") if p.is_file())
    assert a
    for p in a:
        assert p.read_bytes() == (tmp_path / "b" / p.relative_to(tmp_path / "a")).read_bytes()
    assert load_manifest(tmp_path / "a" / "manifest.txt").spec.seed == 7
    manifest = work / "scene" / "manifest.txt"
    for d in ("a", "b"):
        assert run("train", "--manifest", manifest, "--regime", "joint", "--seed", 7, "--out", tmp_path / f"{d}.gsuc",
                   *FAST) == 0
    assert (tmp_path / "a.gsuc").read_bytes() == (tmp_path / "b.gsuc").read_bytes()
    assert (tmp_path / "a.trace.csv").read_text() == (tmp_path / "b.trace.csv").read_text()


def test_uc_without_weights_exits_2(work, capsys):
    code = run("train", "--manifest", work / "scene" / "manifest.txt", "--regime", "uc", "--out", work / "x.gsuc")
    assert code == 2
    err = capsys.readouterr().err
    assert "cvsplat uncertainty" in err and "--weights" in err
    assert not (work / "x.gsuc").exists()


@pytest.mark.parametrize("argv", [
    ["train", "--bogus"],
    ["frobnicate"],
    ["train", "--manifest", "m", "--regime", "aerial", "--out", "o"],
    ["ablate-n", "--manifest", "m", "--values", "1,x"],
    ["render", "--ckpt", "c", "--manifest", "m", "--camera", "h000", "--out", "o", "--threads", "0"],
    [],
])
def test_usage_errors_exit_1(argv, capsys):
    assert run(*argv) == 1
    assert "usage" in capsys.readouterr().err


def test_missing_input_is_runtime_failure(tmp_path, capsys):
    assert run("evaluate", "--ckpt", tmp_path / "nope.gsuc", "--manifest", tmp_path / "nope.txt") == 2
    assert "error" in capsys.readouterr().err


def test_full_pipeline_round_trips(work, capsys):
    manifest = work / "scene" / "manifest.txt"
    (work / "cfg.txt").write_text("iterations = 10\nensemble_size = 2\n")
    assert run("train-ensemble", "--manifest", manifest, "--config", work / "cfg.txt", "--out", work / "ens",
               "--quiet") == 0
    members = load_ensemble(work / "ens")
    assert len(members) == 2
    assert (work / "ens" / "ensemble.txt").read_text().split() == ["member_00.gsuc", "member_01.gsuc"]
    assert TrainConfig.from_file(work / "ens" / "config.txt").iterations == 10
    assert len(read_trace(work / "ens" / "member_00_trace.csv")) == 10

    assert run("uncertainty", "--ensemble", work / "ens", "--manifest", manifest, "--out", work / "weights",
               "--n", 4, "--quiet") == 0
    m = UncertaintyMap.load(work / "weights" / "a000.ucmap")
    assert m.shape == (24, 48) and m.values.min() >= 0 and m.values.max() <= 1
    assert uio.read_png(work / "weights" / "a000.png").shape == (24, 48, 3)
    assert UncertaintyMap.load(work / "weights" / "ground" / "g000.ucmap").shape == (24, 48)

    for regime in ("ground", "joint", "uc"):
        assert run("train", "--manifest", manifest, "--regime", regime, "--weights", work / "weights",
                   "--config", work / "cfg.txt", "--out", work / f"{regime}.gsuc", "--quiet") == 0
        assert len(load_checkpoint(work / f"{regime}.gsuc")) > 0
        assert len(read_trace(work / f"{regime}.trace.csv")) == 10
        assert TrainConfig.from_file(work / f"{regime}.config.txt").iterations == 10

    assert run("render", "--ckpt", work / "uc.gsuc", "--manifest", manifest, "--camera", "r001",
               "--out", work / "r001.png", "--quiet") == 0
    assert uio.read_png(work / "r001.png").shape == (24, 48, 3)

    capsys.readouterr()
    assert run("evaluate", "--ckpt", work / "uc.gsuc", "--manifest", manifest, "--split", "shifted",
               "--out", work / "eval.csv", "--quiet") == 0
    assert "PSNR" in capsys.readouterr().out
    assert (work / "eval.csv").read_text().startswith("view,psnr,ssim")


def test_protocol_and_ablation_commands(work, capsys):
    manifest = work / "scene" / "manifest.txt"
    assert run("protocol", "--manifest", manifest, "--out", work / "proto", "--seeds", "0",
               "--set", "ensemble_size=2", *FAST) == 0
    res = ProtocolResult.read_csv(work / "proto" / "results.csv")
    assert len(res.rows) == 9
    assert "PSNR" in (work / "proto" / "summary.txt").read_text()
    assert len(load_ensemble(work / "proto" / "ensemble")) == 2
    assert run("ablate-n", "--manifest", manifest, "--values", "1,6", "--ensemble", work / "proto" / "ensemble",
               "--out", work / "abl", *FAST) == 0
    assert (work / "abl" / "ablation.csv").read_text().count("\n") == 1 + 2 * 3


def test_module_entry_point():
    res = subprocess.run([sys.executable, "-m", "cvsplat", "--help"], capture_output=True, text=True, timeout=120)
    assert res.returncode == 0 and "generate-scene" in res.stdout
