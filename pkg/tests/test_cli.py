"""End-to-end command-line workflow and exit-code contract."""

import json
from pathlib import Path

import pytest

from mazebench import __version__
from mazebench.agent import load_checkpoint
from mazebench.cli import main
from mazebench.maze import parse_manifest
from mazebench.raycast import read_ppm
from mazebench.world import read_trajectory

TINY_INI = """\
[env]
episode_len = 40
obs_width = 20
obs_height = 20

[agent]
obs_width = 20
obs_height = 20
lstm1_size = 16
lstm2_size = 8

[train]
workers = 1
t_max = 10
max_env_steps = 200

[bench]
n_train = 4
n_test = 2
n_static = 2
cell_cols = 2
cell_rows = 2
episodes_per_map = 2
apple_count = 1
eval_workers = 2
"""


@pytest.fixture()
def workdir(tmp_path):
    (tmp_path / "tiny.ini").write_text(TINY_INI)
    return tmp_path


def _cfg(workdir):
    return ["--config", str(workdir / "tiny.ini")]


def _gen_maps(workdir):
    out = workdir / "maps"
    assert main(["gen-maps", *_cfg(workdir), "--out", str(out)]) == 0
    return out / "maps.manifest"


def _train(workdir, manifest, seed=11):
    out = workdir / "train"
    rc = main([
        "train", *_cfg(workdir), "--stage", "1", "--seed", str(seed),
        "--pool", str(manifest), "--out", str(out),
    ])
    assert rc == 0
    return out / "final.ckpt"


def _tree(path: Path) -> dict[str, bytes]:
    return {
        str(p.relative_to(path)): p.read_bytes()
        for p in sorted(path.rglob("*"))
        if p.is_file()
    }


# ---------------------------------------------------------------------------
# Usage and validation errors
# ---------------------------------------------------------------------------


def test_usage_errors_exit_1(capsys):
    with pytest.raises(SystemExit) as exc:
        main([])
    assert exc.value.code == 1
    with pytest.raises(SystemExit) as exc:
        main(["train", "--stage", "1", "--out", "/tmp/x"])  # no --seed
    assert exc.value.code == 1
    with pytest.raises(SystemExit) as exc:
        main(["frobnicate"])
    assert exc.value.code == 1
    capsys.readouterr()


def test_version_flag(capsys):
    with pytest.raises(SystemExit) as exc:
        main(["--version"])
    assert exc.value.code == 0
    assert __version__ in capsys.readouterr().out


def test_bad_override_exits_2(workdir, capsys):
    rc = main([
        "baseline", *_cfg(workdir), "--seed", "1",
        "--out", str(workdir / "x"), "--set", "env.episode_len=nope",
    ])
    assert rc == 2
    assert "not an integer" in capsys.readouterr().err


def test_missing_config_file_exits_2(tmp_path, capsys):
    rc = main([
        "gen-maps", "--config", str(tmp_path / "absent.ini"),
        "--out", str(tmp_path / "maps"),
    ])
    assert rc == 2
    assert "cannot read" in capsys.readouterr().err


# ---------------------------------------------------------------------------
# gen-maps / train / eval
# ---------------------------------------------------------------------------


def test_gen_maps_writes_manifest_and_info(workdir, capsys):
    manifest = _gen_maps(workdir)
    pool = parse_manifest(manifest.read_text())
    assert len(pool.train_ids) == 4
    assert len(pool.test_ids) == 2
    assert len(pool.static_ids) == 2
    info = json.loads((workdir / "maps" / "pool_info.json").read_text())
    assert info["version"] == __version__
    assert len(info["config_hash"]) == 16
    assert "pool" in capsys.readouterr().out


def test_train_then_eval_roundtrip(workdir, capsys):
    manifest = _gen_maps(workdir)
    ckpt = _train(workdir, manifest)
    assert ckpt.is_file()
    _, _, meta = load_checkpoint(ckpt)
    assert meta["seed"] == 11
    assert meta["stage"] == 1
    assert meta["env_steps"] >= 200
    assert len(meta["config_hash"]) == 16
    assert (workdir / "train" / "progress.csv").is_file()

    out = workdir / "eval"
    rc = main([
        "eval", *_cfg(workdir), "--stage", "1", "--seed", "21",
        "--checkpoint", str(ckpt), "--pool", str(manifest),
        "--out", str(out),
    ])
    assert rc == 0
    assert "episodes=4" in capsys.readouterr().out
    assert (out / "metrics.csv").is_file()
    assert (out / "metrics.json").is_file()
    assert (out / "manifest.txt").is_file()
    logs = sorted((out / "trajectories").iterdir())
    assert len(logs) == 4
    header, records = read_trajectory(logs[0])
    assert header["config_hash"] == meta["config_hash"]
    assert len(records) == 40


def test_eval_config_mismatch_exits_2(workdir, capsys):
    manifest = _gen_maps(workdir)
    ckpt = _train(workdir, manifest)
    rc = main([
        "eval", *_cfg(workdir), "--stage", "1", "--seed", "21",
        "--checkpoint", str(ckpt), "--pool", str(manifest),
        "--out", str(workdir / "x"), "--set", "train.gamma=0.9",
    ])
    assert rc == 2
    assert "config" in capsys.readouterr().err


def test_eval_replay_is_byte_identical(workdir):
    manifest = _gen_maps(workdir)
    ckpt = _train(workdir, manifest)
    out = workdir / "eval"
    assert main([
        "eval", *_cfg(workdir), "--stage", "3", "--seed", "29",
        "--checkpoint", str(ckpt), "--pool", str(manifest), "--out", str(out),
    ]) == 0
    replay = workdir / "replay"
    assert main([
        "eval", *_cfg(workdir), "--replay", str(out / "manifest.txt"),
        "--seed", "29", "--checkpoint", str(ckpt), "--pool", str(manifest),
        "--out", str(replay),
    ]) == 0
    assert _tree(out) == _tree(replay)


# ---------------------------------------------------------------------------
# bench / ablate / analyze / baseline
# ---------------------------------------------------------------------------


def test_bench_writes_summary_and_plots(workdir, capsys):
    manifest = _gen_maps(workdir)
    ckpt = _train(workdir, manifest)
    out = workdir / "bench"
    rc = main([
        "bench", *_cfg(workdir), "--checkpoint", str(ckpt),
        "--seed", "5", "--pool", str(manifest), "--out", str(out),
        "--stages", "1,5",
    ])
    assert rc == 0
    lines = (out / "stage_summary.csv").read_text().splitlines()
    assert lines[0] == "label,reward_mean,reward_std"
    assert len(lines) == 4  # stage 1, stage 5 seen, stage 5 unseen
    assert (out / "stage1" / "metrics.csv").is_file()
    assert (out / "stage5_seen" / "metrics.csv").is_file()
    assert (out / "stage5_unseen" / "metrics.csv").is_file()
    assert (out / "stage_reward.svg").is_file()
    assert (out / "stage_reward.png").read_bytes()[:4] == b"\x89PNG"
    assert "stage 5 unseen" in capsys.readouterr().out


def test_bench_rejects_bad_stage_list(workdir, capsys):
    manifest = _gen_maps(workdir)
    ckpt = _train(workdir, manifest)
    rc = main([
        "bench", *_cfg(workdir), "--checkpoint", str(ckpt), "--seed", "5",
        "--pool", str(manifest), "--out", str(workdir / "x"),
        "--stages", "1,two",
    ])
    assert rc == 2
    capsys.readouterr()


def test_ablate_writes_four_cells(workdir, capsys):
    manifest = _gen_maps(workdir)
    ckpt = _train(workdir, manifest)
    out = workdir / "ablate"
    rc = main([
        "ablate", *_cfg(workdir), "--checkpoint", str(ckpt), "--seed", "5",
        "--pool", str(manifest), "--out", str(out), "--stage", "3",
        "--set", "bench.episodes_per_map=1",
    ])
    assert rc == 2  # config hash now differs from the checkpoint

    rc = main([
        "ablate", *_cfg(workdir), "--checkpoint", str(ckpt), "--seed", "5",
        "--pool", str(manifest), "--out", str(out), "--stage", "3",
    ])
    assert rc == 0
    lines = (out / "ablation_summary.csv").read_text().splitlines()
    assert len(lines) == 5
    for name in ("apples_on__textures_on", "apples_off__textures_off"):
        assert (out / name / "metrics.csv").is_file()
    assert (out / "ablation_reward.svg").is_file()
    capsys.readouterr()


def test_analyze_writes_saliency_and_render(workdir, capsys):
    manifest = _gen_maps(workdir)
    ckpt = _train(workdir, manifest)
    out = workdir / "eval"
    assert main([
        "eval", *_cfg(workdir), "--stage", "1", "--seed", "21",
        "--checkpoint", str(ckpt), "--pool", str(manifest), "--out", str(out),
    ]) == 0
    trajectory = sorted((out / "trajectories").iterdir())[0]
    an = workdir / "analysis"
    rc = main([
        "analyze", *_cfg(workdir), "--trajectory", str(trajectory),
        "--checkpoint", str(ckpt), "--pool", str(manifest),
        "--out", str(an), "--every", "10",
        "--progress", str(workdir / "train" / "progress.csv"),
    ])
    assert rc == 0
    assert "analyzed 40 frames" in capsys.readouterr().out
    payload = json.loads((an / "saliency.json").read_text())
    assert payload["frames"] == 40
    frames = sorted((an / "frames").iterdir())
    assert [f.name for f in frames] == [
        "frame_0000.ppm", "frame_0010.ppm", "frame_0020.ppm", "frame_0030.ppm",
    ]
    top = read_ppm(an / "topdown.ppm")
    assert top.ndim == 3
    assert (an / "reward_curve.svg").is_file()
    assert (an / "reward_curve.png").read_bytes()[:4] == b"\x89PNG"
    info = json.loads((an / "analyze_info.json").read_text())
    assert info["version"] == __version__


def test_baseline_outputs_are_deterministic(workdir, capsys):
    manifest = _gen_maps(workdir)
    outs = []
    for name in ("b1", "b2"):
        out = workdir / name
        rc = main([
            "baseline", *_cfg(workdir), "--seed", "3", "--episodes", "3",
            "--pool", str(manifest), "--out", str(out),
        ])
        assert rc == 0
        outs.append(out)
    assert _tree(outs[0]) == _tree(outs[1])
    info = json.loads((outs[0] / "baseline_info.json").read_text())
    assert info["episodes"] == 3
    assert (outs[0] / "metrics.csv").is_file()
    capsys.readouterr()


def test_dump_config_prints_resolved_values(workdir, capsys):
    rc = main(["dump-config", *_cfg(workdir), "--set", "env.episode_len=99"])
    assert rc == 0
    out = capsys.readouterr().out
    assert out.startswith("# config hash: ")
    assert "episode_len = 99" in out
    assert "[bench]" in out


def test_selftest_command_passes(capsys):
    assert main(["selftest"]) == 0
    out = capsys.readouterr().out
    assert "PASS maze-invariants" in out
    assert "FAIL" not in out
