import json
import subprocess
import sys

import pytest

from regionvad import cli, formats

SCENE = ["--layout", "four-zone", "--n-frames", "300"]


def run(capsys, *argv):
    code = cli.main([str(a) for a in argv])
    lines = capsys.readouterr().out.strip().splitlines()
    return code, json.loads(lines[-1])


@pytest.fixture(scope="module")
def pipeline(tmp_path_factory):
    """simulate (train and test) -> discover -> train -> score -> evaluate."""
    root = tmp_path_factory.mktemp("pipe")
    steps = {
        "train_sim": ["simulate", "--seed", 1, *SCENE, "--video-id", "train"],
        "test_sim": ["simulate", "--seed", 2, *SCENE, "--video-id", "test",
                     "--anomaly-rate", 0.2],
    }
    codes = {}
    for name, argv in steps.items():
        codes[name] = cli.main([str(a) for a in argv + ["--out-dir", root / name]])
    tr, te = root / "train_sim" / "tracklets.jsonl", root / "test_sim" / "tracklets.jsonl"
    codes["discover"] = cli.main(["discover", "--tracklets", str(tr), "--K", "4", "--height", "96",
                                  "--width", "128", "--out-dir", str(root / "discover")])
    rmap = root / "discover" / "region_map.pgm"
    codes["train"] = cli.main(["train", "--tracklets", str(tr), "--region-map", str(rmap),
                               "--out-dir", str(root / "train")])
    models = root / "train" / "models.json"
    codes["score"] = cli.main(["score", "--tracklets", str(te), "--region-map", str(rmap),
                               "--models", str(models), "--n-frames", "300",
                               "--out-dir", str(root / "score")])
    codes["evaluate"] = cli.main(["evaluate", "--scores", str(root / "score" / "frame_scores.csv"),
                                  "--tracklet-scores", str(root / "score" / "tracklet_scores.jsonl"),
                                  "--annotations", str(root / "test_sim" / "annotations.jsonl"),
                                  "--out-dir", str(root / "evaluate")])
    return root, codes


def test_pipeline_exits_cleanly(pipeline):
    root, codes = pipeline
    assert all(c == 0 for c in codes.values()), codes
    report = formats.read_metrics(root / "evaluate" / "metrics.json")
    for key in ("auc", "rbdc", "tbdc", "rbdc_curve", "n_frames"):
        assert key in report
    assert 0.0 <= report["auc"] <= 1.0 and report["n_frames"] == 300


def test_config_is_echoed(pipeline):
    root, _ = pipeline
    cfg = formats.read_config(root / "test_sim" / "simulate.config.txt")
    assert cfg.seed == 2 and cfg.anomaly_rate == 0.2 and cfg.n_frames == 300


def test_summary_goes_to_stdout(pipeline, capsys):
    root, _ = pipeline
    code, summary = run(capsys, "render", "--region-map", root / "discover" / "region_map.pgm",
                        "--tracklets", root / "train_sim" / "tracklets.jsonl",
                        "--out-dir", root / "render")
    assert code == 0 and summary["status"] == "ok" and summary["K"] == 4
    assert (root / "render" / "heatmap.pgm").exists()


def test_explain_lists_prototypes(pipeline, capsys):
    root, _ = pipeline
    code, summary = run(capsys, "explain", "--tracklets", root / "train_sim" / "tracklets.jsonl",
                        "--region-map", root / "discover" / "region_map.pgm",
                        "--models", root / "train" / "models.json", "--out-dir", root / "explain")
    assert code == 0 and len(summary["regions"]) == 4
    doc = formats.read_document(root / "explain" / "prototypes.json", "prototypes")
    assert any(r["prototypes"] for r in doc["regions"])


def test_hash_mismatch_exits_one(pipeline, capsys):
    root, _ = pipeline
    code, summary = run(capsys, "score", "--tracklets", root / "test_sim" / "tracklets.jsonl",
                        "--region-map", root / "test_sim" / "true_regions.pgm",
                        "--models", root / "train" / "models.json", "--n-frames", 300,
                        "--out-dir", root / "bad")
    assert code == 1 and "hash mismatch" in summary["error"]


def test_missing_input_exits_one(tmp_path, capsys):
    missing = tmp_path / "nope.jsonl"
    code, summary = run(capsys, "discover", "--tracklets", missing, "--out-dir", tmp_path)
    assert code == 1 and str(missing) in summary["error"]


def test_invalid_config_exits_one(tmp_path, capsys):
    (tmp_path / "c.txt").write_text("t_w=0\n")
    code, _ = run(capsys, "toy", "--config", tmp_path / "c.txt", "--out-dir", tmp_path)
    assert code == 1


def test_runtime_failure_exits_two(tmp_path, capsys, monkeypatch):
    def boom(*a, **k):
        raise RuntimeError("solver exploded")

    monkeypatch.setattr(cli.synth, "generate_toy", boom)
    code, summary = run(capsys, "toy", "--out-dir", tmp_path)
    assert code == 2 and summary["status"] == "failed"


def test_flags_override_config(tmp_path, capsys):
    (tmp_path / "c.txt").write_text("# toy settings\nn_train=300\nn_test=200\nseed=5\n")
    code, summary = run(capsys, "toy", "--config", tmp_path / "c.txt", "--n-test", 100,
                        "--seed", 6, "--k-max", 4, "--out-dir", tmp_path)
    assert code == 0
    cfg = formats.read_config(tmp_path / "toy.config.txt")
    assert (cfg.n_train, cfg.n_test, cfg.seed, cfg.k_max) == (300, 100, 6, 4)


def _tree(path):
    return {p.relative_to(path).as_posix(): p.read_bytes() for p in sorted(path.rglob("*"))
            if p.is_file()}


def test_every_subcommand_is_byte_reproducible(pipeline, tmp_path):
    root, _ = pipeline
    tr = root / "train_sim" / "tracklets.jsonl"
    te = root / "test_sim" / "tracklets.jsonl"
    rmap = root / "discover" / "region_map.pgm"
    models = root / "train" / "models.json"
    commands = {
        "simulate": ["simulate", "--seed", 3, *SCENE, "--anomaly-rate", 0.1, "--flow"],
        "toy": ["toy", "--n-train", 500, "--n-test", 400, "--k-max", 5],
        "discover": ["discover", "--tracklets", tr, "--K", 3],
        "select-k": ["select-k", "--tracklets", tr, "--k-candidates", "2,4"],
        "train": ["train", "--tracklets", tr, "--region-map", rmap],
        "score": ["score", "--tracklets", te, "--region-map", rmap, "--models", models,
                  "--n-frames", 300],
        "evaluate": ["evaluate", "--scores", root / "score" / "frame_scores.csv",
                     "--tracklet-scores", root / "score" / "tracklet_scores.jsonl",
                     "--annotations", root / "test_sim" / "annotations.jsonl"],
        "explain": ["explain", "--tracklets", tr, "--region-map", rmap, "--models", models],
        "render": ["render", "--region-map", rmap, "--tracklets", tr],
    }
    assert set(commands) == set(cli.COMMANDS)
    for name, argv in commands.items():
        trees = []
        for rep in ("a", "b"):
            out = tmp_path / name / rep
            assert cli.main([str(a) for a in argv] + ["--out-dir", str(out)]) == 0, name
            trees.append(_tree(out))
        assert trees[0] == trees[1], name
        assert trees[0], name


def test_flow_driven_features(tmp_path, capsys):
    sim = tmp_path / "sim"
    assert cli.main(["simulate", "--seed", "4", *map(str, SCENE), "--flow",
                     "--out-dir", str(sim)]) == 0
    code, summary = run(capsys, "discover", "--tracklets", sim / "tracklets.jsonl",
                        "--flow-dir", sim / "flow", "--K", 4, "--out-dir", tmp_path / "d")
    assert code == 0 and summary["k_effective"] == 4


def test_module_entry_point(tmp_path):
    proc = subprocess.run([sys.executable, "-m", "regionvad", "toy", "--n-train", "300",
                           "--n-test", "200", "--k-max", "3", "--out-dir", str(tmp_path)],
                          capture_output=True, text=True, timeout=120)
    assert proc.returncode == 0, proc.stderr
    assert json.loads(proc.stdout)["status"] == "ok"
