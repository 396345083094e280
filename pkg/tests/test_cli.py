"""CLI surface tests: every subcommand end to end on a micro corpus, exit
codes, config resolution order, and byte-level reproducibility of outputs."""

import filecmp

import numpy as np
import pytest

from avatr.audio import read_wav, write_wav, Waveform
from avatr.cli import main
from avatr.config import CliConfig, default_config, resolve_config
from avatr.errors import ConfigError
from avatr.models import read_checkpoint


def run_cli(*argv):
    return main(list(argv))


@pytest.fixture(scope="module")
def workdir(tmp_path_factory):
    """A micro corpus plus a micro training config shared by CLI tests."""
    root = tmp_path_factory.mktemp("cli")
    code = run_cli("synth", "--out", str(root / "corpus"), "--speakers", "4",
                   "--clips", "5", "--seed", "11", "--rate", "8000",
                   "--regime", "closed")
    assert code == 0
    cfg = root / "micro.cfg"
    cfg.write_text(
        "# micro training profile\n"
        f"data.manifest = {root / 'corpus' / 'manifest.tsv'}\n"
        "data.sample_rate = 8000\n"
        "model.variant = v1\n"
        "model.hidden = 8\n"
        "model.blocks = 1\n"
        "model.heads = 2\n"
        "model.dropout = 0.0\n"
        "model.emb_kernel = 16\n"
        "model.emb_stride = 8\n"
        "train.lr = 0.001\n"
        "train.batch_size = 2\n"
        "train.max_epochs = 2\n"
        "train.batches_per_epoch = 2\n"
        "train.val_episodes = 3\n"
        "train.clip_seconds = 0.25\n"
        "train.ref_seconds = 0.25\n"
        "train.seed = 3\n"
        f"train.checkpoint = {root / 'micro.avtr'}\n"
        f"train.log = {root / 'micro_log.csv'}\n")
    code = run_cli("train", "--config", str(cfg))
    assert code == 0
    return root


class TestConfigResolution:
    def test_defaults_then_file_then_overrides(self, tmp_path):
        path = tmp_path / "c.cfg"
        path.write_text("model.hidden = 64\ntrain.lr = 0.01\n")
        cfg = resolve_config("train", str(path), ["model.hidden=32"])
        assert cfg.values["model.hidden"] == 32          # override wins
        assert cfg.values["train.lr"] == 0.01            # file beats default
        assert cfg.values["train.batch_size"] == 16      # untouched default

    def test_paper_defaults(self):
        defaults = default_config()
        assert defaults["train.batch_size"] == 16
        assert defaults["train.lr"] == 1e-4
        assert defaults["model.blocks"] == 5
        assert defaults["model.hidden"] == 256

    def test_unknown_key_rejected(self, tmp_path):
        path = tmp_path / "bad.cfg"
        path.write_text("model.depth = 3\n")
        with pytest.raises(ConfigError, match="unknown config key"):
            resolve_config("train", str(path))
        with pytest.raises(ConfigError, match="unknown config key"):
            resolve_config("train", None, ["train.momentum=0.9"])

    def test_bad_value_rejected(self):
        with pytest.raises(ConfigError, match="bad value"):
            resolve_config("train", None, ["model.hidden=many"])
        with pytest.raises(ConfigError, match="bad value"):
            resolve_config("train", None, ["model.positional_encoding=maybe"])

    def test_echo_lines_cover_every_key(self):
        cfg = resolve_config("train", None, ["model.variant=v2"])
        lines = cfg.echo_lines()
        assert len(lines) == len(default_config())
        assert "model.variant = v2" in lines
        assert isinstance(cfg, CliConfig) and cfg.overrides == ["model.variant=v2"]

    def test_on_off_rendering(self):
        cfg = resolve_config("train", None, ["model.positional_encoding=off"])
        assert cfg.values["model.positional_encoding"] is False
        assert "model.positional_encoding = off" in cfg.echo_lines()


class TestSynth:
    def test_counts(self, workdir):
        corpus = workdir / "corpus"
        wavs = sorted((corpus / "speech").rglob("*.wav"))
        assert len(wavs) == 20
        noise = sorted((corpus / "noise").glob("*.wav"))
        assert len(noise) == 9
        assert (corpus / "manifest.tsv").exists()

    def test_same_seed_byte_identical(self, tmp_path):
        for sub in ("a", "b"):
            assert run_cli("synth", "--out", str(tmp_path / sub), "--speakers", "2",
                           "--clips", "3", "--seed", "5", "--rate", "8000") == 0
        for rel in sorted(p.relative_to(tmp_path / "a")
                          for p in (tmp_path / "a").rglob("*.wav")):
            assert filecmp.cmp(tmp_path / "a" / rel, tmp_path / "b" / rel,
                               shallow=False)

    def test_nonempty_dir_requires_force(self, tmp_path):
        out = tmp_path / "occupied"
        out.mkdir()
        (out / "junk.txt").write_text("x")
        assert run_cli("synth", "--out", str(out), "--speakers", "2",
                       "--clips", "3") == 2
        assert run_cli("synth", "--out", str(out), "--speakers", "2",
                       "--clips", "3", "--force") == 0

    def test_single_speaker_rejected_clearly(self, tmp_path, capsys):
        assert run_cli("synth", "--out", str(tmp_path / "solo"),
                       "--speakers", "1", "--clips", "3") == 2
        assert "at least 2 speakers" in capsys.readouterr().err


class TestTrain:
    def test_writes_checkpoint_and_log(self, workdir):
        assert (workdir / "micro.avtr").exists()
        assert (workdir / "micro_log.csv").exists()

    def test_log_echoes_resolved_config(self, workdir):
        lines = (workdir / "micro_log.csv").read_text().splitlines()
        header = [l for l in lines if l.startswith("# ")]
        assert "# model.hidden = 8" in header
        assert "# train.batch_size = 2" in header
        csv_start = lines.index("epoch,train_loss,val_loss,lr")
        assert len(lines) - csv_start - 1 == 2  # one row per epoch

    def test_missing_manifest_key_is_usage_error(self, capsys):
        assert run_cli("train") == 1
        assert "data.manifest" in capsys.readouterr().err

    def test_reference_architecture_shape_from_overrides(self, workdir, tmp_path):
        # blocks=5 / hidden=256 is the reported reference configuration; the
        # checkpoint must round-trip those dimensions.
        ckpt = tmp_path / "ref.avtr"
        code = run_cli(
            "train", "--config", str(workdir / "micro.cfg"), "--set",
            "model.blocks=5", "model.hidden=256", "model.heads=8",
            "train.batch_size=1", "train.batches_per_epoch=1",
            "train.max_epochs=1", "train.val_episodes=1",
            "model.emb_kernel=64", "model.emb_stride=32",
            f"train.checkpoint={ckpt}", f"train.log={tmp_path / 'ref_log.csv'}")
        assert code == 0
        model = read_checkpoint(ckpt)
        assert model.config.hidden == 256 and model.config.blocks == 5
        assert len(model.sabs) == 5

    def test_v2_builds_conditional_blocks(self, workdir, tmp_path):
        ckpt = tmp_path / "v2.avtr"
        code = run_cli(
            "train", "--config", str(workdir / "micro.cfg"), "--set",
            "model.variant=v2", "model.enc_blocks=1", "model.cond_blocks=1",
            "train.max_epochs=1", "train.batches_per_epoch=1",
            "train.batch_size=1", "train.val_episodes=1",
            f"train.checkpoint={ckpt}", f"train.log={tmp_path / 'v2_log.csv'}")
        assert code == 0
        names = [n for n, _ in read_checkpoint(ckpt).named_parameters()]
        assert any(n.startswith("cabs.0.") for n in names)
        assert any(n.startswith("enc_sabs.0.") for n in names)

    def test_two_runs_byte_identical_outputs(self, workdir, tmp_path):
        outs = []
        for sub in ("r1", "r2"):
            d = tmp_path / sub
            d.mkdir()
            code = run_cli("train", "--config", str(workdir / "micro.cfg"), "--set",
                           f"train.checkpoint={d / 'm.avtr'}",
                           f"train.log={d / 'log.csv'}")
            assert code == 0
            outs.append(d)
        assert (outs[0] / "m.avtr").read_bytes() == (outs[1] / "m.avtr").read_bytes()
        # Config echoes differ in the output paths; the data rows must not.
        rows = [[l for l in (d / "log.csv").read_text().splitlines()
                 if not l.startswith("#")] for d in outs]
        assert rows[0] == rows[1]


class TestEval:
    def test_csv_outputs(self, workdir, tmp_path):
        out = tmp_path / "report.csv"
        code = run_cli("eval", "--ckpt", str(workdir / "micro.avtr"),
                       "--manifest", str(workdir / "corpus" / "manifest.tsv"),
                       "--regime", "closed", "--mixture", "s+s",
                       "--episodes", "5", "--out", str(out),
                       "--clip-seconds", "0.25", "--ref-seconds", "0.25")
        assert code == 0
        lines = out.read_text().splitlines()
        assert lines[0] == "episode,input_sisdr,output_sisdr"
        assert len(lines) == 6  # header + N
        hist = tmp_path / "report_hist.csv"
        rows = hist.read_text().splitlines()[1:]
        assert sum(int(r.split(",")[2]) for r in rows) == 5

    def test_rerun_identical(self, workdir, tmp_path):
        args = ("eval", "--ckpt", str(workdir / "micro.avtr"),
                "--manifest", str(workdir / "corpus" / "manifest.tsv"),
                "--regime", "closed", "--mixture", "s+n", "--episodes", "4",
                "--seed", "9", "--clip-seconds", "0.25", "--ref-seconds", "0.25")
        a, b = tmp_path / "a.csv", tmp_path / "b.csv"
        assert run_cli(*args, "--out", str(a)) == 0
        assert run_cli(*args, "--out", str(b)) == 0
        assert a.read_text() == b.read_text()

    def test_open_regime_mismatch_is_data_error(self, workdir, tmp_path, capsys):
        code = run_cli("eval", "--ckpt", str(workdir / "micro.avtr"),
                       "--manifest", str(workdir / "corpus" / "manifest.tsv"),
                       "--regime", "open", "--mixture", "s+s", "--episodes", "2",
                       "--out", str(tmp_path / "x.csv"))
        assert code == 2
        assert "open-set regime violated" in capsys.readouterr().err


class TestExtract:
    def test_output_duration_matches_mixture(self, workdir, tmp_path, rng):
        mix = tmp_path / "mix.wav"
        ref = tmp_path / "ref.wav"
        write_wav(mix, Waveform(rng.uniform(-0.5, 0.5, 3210), 8000))
        write_wav(ref, Waveform(rng.uniform(-0.5, 0.5, 2000), 8000))
        out = tmp_path / "out.wav"
        code = run_cli("extract", "--ckpt", str(workdir / "micro.avtr"),
                       "--mix", str(mix), "--ref", str(ref), "--out", str(out))
        assert code == 0
        got = read_wav(out)
        assert len(got) == 3210 and got.sample_rate == 8000

    def test_deterministic_given_checkpoint(self, workdir, tmp_path, rng):
        mix = tmp_path / "m.wav"
        ref = tmp_path / "r.wav"
        write_wav(mix, Waveform(rng.uniform(-0.5, 0.5, 1600), 8000))
        write_wav(ref, Waveform(rng.uniform(-0.5, 0.5, 1600), 8000))
        a, b = tmp_path / "a.wav", tmp_path / "b.wav"
        for out in (a, b):
            assert run_cli("extract", "--ckpt", str(workdir / "micro.avtr"),
                           "--mix", str(mix), "--ref", str(ref),
                           "--out", str(out)) == 0
        assert a.read_bytes() == b.read_bytes()

    def test_rate_mismatch_is_data_error(self, workdir, tmp_path, rng, capsys):
        mix = tmp_path / "bad.wav"
        write_wav(mix, Waveform(rng.uniform(-0.5, 0.5, 1600), 16000))
        code = run_cli("extract", "--ckpt", str(workdir / "micro.avtr"),
                       "--mix", str(mix), "--ref", str(mix),
                       "--out", str(tmp_path / "o.wav"))
        assert code == 2
        assert "expected 8000" in capsys.readouterr().err


class TestExportAvatars:
    def test_row_per_speaker_clip(self, workdir, tmp_path):
        out = tmp_path / "avatars.csv"
        code = run_cli("export-avatars", "--ckpt", str(workdir / "micro.avtr"),
                       "--manifest", str(workdir / "corpus" / "manifest.tsv"),
                       "--out", str(out), "--ref-seconds", "0.5")
        assert code == 0
        lines = out.read_text().splitlines()
        assert len(lines) == 1 + 20  # header + 4 speakers x 5 clips
        assert lines[0].split(",")[0] == "speaker_id"
        assert all(len(l.split(",")) == 9 for l in lines[1:])  # id + hidden=8

    def test_rerun_identical_rows(self, workdir, tmp_path):
        a, b = tmp_path / "a.csv", tmp_path / "b.csv"
        for out in (a, b):
            assert run_cli("export-avatars", "--ckpt", str(workdir / "micro.avtr"),
                           "--manifest", str(workdir / "corpus" / "manifest.tsv"),
                           "--out", str(out), "--ref-seconds", "0.5") == 0
        assert a.read_text() == b.read_text()


class TestExitCodes:
    def test_usage_error_is_1(self, capsys):
        assert run_cli("train", "--bogus-flag") == 1
        assert run_cli("nonsense") == 1
        capsys.readouterr()

    def test_missing_data_is_2(self, tmp_path, capsys):
        assert run_cli("eval", "--ckpt", str(tmp_path / "missing.avtr"),
                       "--manifest", str(tmp_path / "missing.tsv"),
                       "--regime", "open", "--mixture", "s+s", "--episodes", "1",
                       "--out", str(tmp_path / "o.csv")) == 2
        capsys.readouterr()

    def test_unknown_override_key_is_1(self, workdir, capsys):
        assert run_cli("train", "--config", str(workdir / "micro.cfg"),
                       "--set", "train.wrong=1") == 1
        capsys.readouterr()
