import math

import pytest

from crystalpretrain.cli import (ConfigError, RunConfig, main, read_config_file)
from crystalpretrain.datasets import load_manifest

SYNTH = ["--set", "synth.n_crystals=20", "--set", "synth.max_atoms=4"]
FAST_TRAIN = [
    "--set", "model.hidden_dim=6", "--set", "model.n_conv=1",
    "--set", "model.embed_dim=4", "--set", "model.head_hidden=4",
    "--set", "train.batch_size=8", "--set", "train.epochs=1",
    "--set", "train.eval_every_steps=1", "--set", "graph.radius=6.0",
    "--set", "train.pretrain_eval_fraction=0.1",
]


def run(args):
    return main([str(a) for a in args])


@pytest.fixture(scope="module")
def synth_dir(tmp_path_factory):
    out = tmp_path_factory.mktemp("synth")
    assert run(["--out", out, "--seed", "3", *SYNTH, "synth"]) == 0
    return out


def test_synth_outputs(synth_dir):
    cifs = sorted((synth_dir / "crystals").glob("*.cif"))
    assert len(cifs) == 20
    manifest = load_manifest(synth_dir / "manifest.csv")
    labels = sorted({r.surrogate_label for r in manifest.records})
    assert labels == [0, 1]


def test_synth_four_crystals(tmp_path):
    assert run(["--out", tmp_path, "--seed", "9",
                "--set", "synth.n_crystals=4", "synth"]) == 0
    assert len(list((tmp_path / "crystals").glob("*.cif"))) == 4
    assert (tmp_path / "manifest.csv").exists()


def test_synth_byte_deterministic(tmp_path, synth_dir):
    again = tmp_path / "again"
    assert run(["--out", again, "--seed", "3", *SYNTH, "synth"]) == 0
    assert (again / "manifest.csv").read_bytes() == \
        (synth_dir / "manifest.csv").read_bytes()
    for cif in (synth_dir / "crystals").glob("*.cif"):
        assert (again / "crystals" / cif.name).read_bytes() == cif.read_bytes()


def test_stats_command(tmp_path, synth_dir, capsys):
    out = tmp_path / "stats"
    assert run(["--out", out, "stats", synth_dir / "manifest.csv"]) == 0
    lines = (out / "stats.csv").read_text().strip().splitlines()
    assert lines[0] == "element,count"
    counts = [int(line.split(",")[1]) for line in lines[1:]]
    assert counts == sorted(counts, reverse=True)
    printed = capsys.readouterr().out
    assert "shannon_entropy_nats=" in printed


def test_unknown_key_exits_2(synth_dir, capsys):
    code = run(["--set", "loss.gamma=1.0", "pretrain", synth_dir / "manifest.csv"])
    assert code == 2
    assert "loss.gamma" in capsys.readouterr().err


def test_invalid_value_exits_2(synth_dir):
    assert run(["--set", "loss.kind=simclr", "pretrain",
                synth_dir / "manifest.csv"]) == 2
    assert run(["--set", "train.batch_size=one", "pretrain",
                synth_dir / "manifest.csv"]) == 2


def test_missing_manifest_exits_3(tmp_path):
    assert run(["--out", tmp_path, "pretrain", tmp_path / "nope.csv"]) == 3


@pytest.mark.filterwarnings("ignore:overflow")
def test_numerical_failure_exits_4(synth_dir, tmp_path):
    # an absurd learning rate detonates the parameters within a step or two
    code = run(["--out", tmp_path, "--seed", "1", *FAST_TRAIN,
                "--set", "train.lr=1e155", "--set", "train.epochs=2",
                "pretrain", synth_dir / "manifest.csv"])
    assert code == 4


def test_module_entry_point():
    import subprocess
    import sys
    proc = subprocess.run([sys.executable, "-m", "crystalpretrain", "--help"],
                          capture_output=True, text=True)
    assert proc.returncode == 0
    assert "augment-preview" in proc.stdout


def test_config_file_end_to_end(synth_dir, tmp_path):
    cfg = tmp_path / "run.cfg"
    cfg.write_text("""
model.hidden_dim = 6      # tiny model for the smoke run
model.n_conv = 1
model.embed_dim = 4
model.head_hidden = 4
train.batch_size = 8
train.epochs = 1
train.pretrain_eval_fraction = 0.1
graph.radius = 6.0
""")
    out = tmp_path / "run"
    assert run(["--config", cfg, "--out", out, "--seed", "5",
                "pretrain", synth_dir / "manifest.csv"]) == 0
    assert (out / "final.ckpt").exists()


def test_config_error_leaves_no_output(synth_dir, tmp_path):
    out = tmp_path / "untouched"
    assert run(["--out", out, "--set", "loss.gamma=1", "pretrain",
                synth_dir / "manifest.csv"]) == 2
    assert not out.exists()
    assert run(["--out", out, "--set", "loss.kind=simclr", "pretrain",
                synth_dir / "manifest.csv"]) == 2
    assert not out.exists()


def test_config_file_parsing(tmp_path):
    cfg = tmp_path / "run.cfg"
    cfg.write_text("""
# pretraining setup
loss.kind = sup-bt
loss.lambda = 0.0051   # balance of the repel term
train.batch_size = 128
""")
    pairs = read_config_file(cfg)
    assert pairs == {"loss.kind": "sup-bt", "loss.lambda": "0.0051",
                     "train.batch_size": "128"}
    rc = RunConfig(pairs)
    assert rc.loss_config().lam == 0.0051
    assert rc.train_config("pretrain").batch_size == 128


def test_paper_configurations_accepted():
    rc = RunConfig({"loss.kind": "sup-bt", "loss.lambda": "0.0051",
                    "train.batch_size": "128"})
    cfg = rc.train_config("pretrain")
    assert cfg.loss.lam == 0.0051 and cfg.batch_size == 128

    rc = RunConfig({"loss.kind": "supcon", "loss.temperature": "0.03"})
    cfg = rc.train_config("pretrain")
    assert cfg.loss.temperature == 0.03 and cfg.batch_size == 256

    with pytest.raises(ConfigError):
        RunConfig({"loss.gamma": "1.0"})


def test_alpha_alias_sets_lambda():
    rc = RunConfig({"loss.alpha": "0.25"})
    assert rc.loss_config().lam == 0.25


@pytest.fixture(scope="module")
def trained(tmp_path_factory, synth_dir):
    out = tmp_path_factory.mktemp("trained")
    manifest = synth_dir / "manifest.csv"
    assert run(["--out", out / "pre", "--seed", "1", *FAST_TRAIN,
                "pretrain", manifest]) == 0
    assert run(["--out", out / "ft", "--seed", "1", *FAST_TRAIN,
                "finetune", manifest, "--checkpoint", out / "pre" / "final.ckpt"]) == 0
    return out


def test_pretrain_outputs(trained):
    assert (trained / "pre" / "final.ckpt").exists()
    assert (trained / "pre" / "epoch-0001.ckpt").exists()
    log = (trained / "pre" / "log.csv").read_text().splitlines()
    assert log[0] == "step,epoch,phase,loss,metric_name,metric_value"
    assert any("eval_loss" in line for line in log[1:])


def test_finetune_outputs(trained):
    metrics = (trained / "ft" / "metrics.csv").read_text().splitlines()
    assert metrics[0] == "metric,value"
    assert any(line.startswith("test_mae,") for line in metrics[1:])
    assert (trained / "ft" / "best.ckpt").exists()


def test_finetune_needs_checkpoint_choice(synth_dir, tmp_path):
    assert run(["--out", tmp_path, "finetune", synth_dir / "manifest.csv"]) == 2


def test_finetune_no_pretrain_baseline(synth_dir, tmp_path):
    assert run(["--out", tmp_path, "--seed", "1", *FAST_TRAIN,
                "finetune", synth_dir / "manifest.csv", "--no-pretrain"]) == 0
    assert (tmp_path / "metrics.csv").exists()


def test_finetune_classification_emits_accuracy(synth_dir, tmp_path):
    # rewrite the targets into the 0/1 surrogate labels
    manifest = load_manifest(synth_dir / "manifest.csv")
    for rec in manifest.records:
        rec.target = float(rec.surrogate_label)
    from crystalpretrain.datasets import save_manifest
    cls_dir = tmp_path / "data"
    (cls_dir / "crystals").mkdir(parents=True)
    for rec in manifest.records:
        (cls_dir / "crystals" / f"{rec.id}.cif").write_bytes(
            (synth_dir / "crystals" / f"{rec.id}.cif").read_bytes())
        rec.cif_path = f"crystals/{rec.id}.cif"
    save_manifest(manifest, cls_dir / "manifest.csv")

    out = tmp_path / "cls"
    assert run(["--out", out, "--seed", "1", *FAST_TRAIN,
                "--set", "train.task=binary-classification",
                "finetune", cls_dir / "manifest.csv", "--no-pretrain"]) == 0
    text = (out / "metrics.csv").read_text()
    assert "test_accuracy," in text and "test_mae," not in text


def test_evaluate_command(trained, synth_dir, tmp_path):
    assert run(["--out", tmp_path, "--seed", "1", *FAST_TRAIN,
                "evaluate", synth_dir / "manifest.csv",
                "--checkpoint", trained / "ft" / "best.ckpt"]) == 0
    text = (tmp_path / "metrics.csv").read_text()
    assert "test_mae," in text


def test_embed_command(trained, synth_dir, tmp_path):
    assert run(["--out", tmp_path, "--seed", "1",
                "embed", synth_dir / "manifest.csv",
                "--checkpoint", trained / "pre" / "final.ckpt"]) == 0
    lines = (tmp_path / "embeddings.csv").read_text().strip().splitlines()
    header = lines[0].split(",")
    assert header[:2] == ["id", "label"]
    assert len(header) == 2 + 4  # embed_dim=4 in FAST_TRAIN
    assert len(lines) - 1 == 4  # floor(0.2 * 20) test rows

    again = tmp_path / "again"
    assert run(["--out", again, "--seed", "1",
                "embed", synth_dir / "manifest.csv",
                "--checkpoint", trained / "pre" / "final.ckpt"]) == 0
    assert (again / "embeddings.csv").read_bytes() == \
        (tmp_path / "embeddings.csv").read_bytes()


def test_augment_preview(synth_dir, tmp_path):
    manifest = load_manifest(synth_dir / "manifest.csv")
    rec_id = manifest.records[0].id
    assert run(["--out", tmp_path, "--seed", "2", "--set", "graph.radius=6.0",
                "augment-preview", synth_dir / "manifest.csv", "--id", rec_id]) == 0
    lines = (tmp_path / "preview.csv").read_text().strip().splitlines()
    assert lines[0] == "view,edge,i,j,d,d_noised,masked,feature_l2"
    rows = [line.split(",") for line in lines[1:]]
    per_view = {}
    for row in rows:
        d, dn = float(row[4]), float(row[5])
        assert abs(d - dn) <= 0.5
        per_view.setdefault(row[0], []).append(int(row[6]))
    for view, masked in per_view.items():
        expected = max(1, int(math.floor(0.1 * len(masked) + 0.5)))
        assert sum(masked) == expected


def test_augment_preview_unknown_id(synth_dir, tmp_path):
    assert run(["--out", tmp_path, "augment-preview", synth_dir / "manifest.csv",
                "--id", "nope"]) == 3


def test_augment_preview_zero_delta(synth_dir, tmp_path):
    manifest = load_manifest(synth_dir / "manifest.csv")
    assert run(["--out", tmp_path, "--set", "augment.gndn_delta=0",
                "--set", "graph.radius=6.0",
                "augment-preview", synth_dir / "manifest.csv",
                "--id", manifest.records[0].id]) == 0
    lines = (tmp_path / "preview.csv").read_text().strip().splitlines()[1:]
    for line in lines:
        row = line.split(",")
        assert row[4] == row[5]
