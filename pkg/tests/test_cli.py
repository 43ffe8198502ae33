import shutil

import numpy as np
import pytest

from gatedcrnn import cli
from gatedcrnn.evaluation import parse_report, read_posteriors
from gatedcrnn.features import write_wav


@pytest.fixture(scope="module")
def corpus(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli") / "corp"
    assert cli.main(["synth", str(root), "--clips", "8", "--classes", "2", "--seed", "4"]) == 0
    assert cli.main(["extract", str(root / "wav"), str(root / "features")]) == 0
    return root


TINY = ["--filters", "2", "--hidden", "4", "--batch-size", "4"]


def _train(corpus, out, *extra):
    return cli.main(["train", str(corpus / "manifest.csv"), str(corpus / "labels.txt"),
                     "--out", str(out), *TINY, *extra])


@pytest.fixture(scope="module")
def run(corpus, tmp_path_factory):
    out = tmp_path_factory.mktemp("run")
    assert _train(corpus, out, "--epochs", "2", "--mode", "sed") == 0
    return out


def test_synth_layout(corpus):
    assert len(list((corpus / "wav").glob("*.wav"))) == 8
    assert len((corpus / "manifest.csv").read_text().splitlines()) == 8


def test_extract_outputs(corpus, capsys):
    assert len(list((corpus / "features").glob("synth*.feat"))) == 8
    assert (corpus / "features" / "stats.feat").exists()


def test_extract_empty_dir(tmp_path, capsys):
    (tmp_path / "in").mkdir()
    assert cli.main(["extract", str(tmp_path / "in"), str(tmp_path / "out")]) == 2
    assert "no input files" in capsys.readouterr().err


def test_extract_skips_corrupt(tmp_path, caplog):
    d = tmp_path / "in"
    d.mkdir()
    for i in range(2):
        write_wav(d / f"ok{i}.wav", np.zeros(16000))
    (d / "bad.wav").write_bytes(b"RIFF not really a wav")
    assert cli.main(["extract", str(d), str(tmp_path / "out")]) == 0
    assert sorted(p.name for p in (tmp_path / "out").glob("ok*.feat")) == ["ok0.feat", "ok1.feat"]
    assert any("bad.wav" in r.getMessage() for r in caplog.records)


def test_extract_all_corrupt(tmp_path):
    d = tmp_path / "in"
    d.mkdir()
    (d / "bad.wav").write_bytes(b"junk")
    assert cli.main(["extract", str(d), str(tmp_path / "out")]) == 2


def test_train_one_epoch_one_checkpoint(corpus, tmp_path):
    assert _train(corpus, tmp_path, "--epochs", "1") == 0
    assert [p.name for p in tmp_path.glob("*.ckpt")] == ["epoch_001.ckpt"]
    assert (tmp_path / "run.log").read_text().startswith("epoch=1 ")
    assert "f1" in parse_report((tmp_path / "report.txt").read_text())


def test_train_same_seed_identical_checkpoints(corpus, tmp_path):
    for d in ("a", "b"):
        assert _train(corpus, tmp_path / d, "--epochs", "1", "--seed", "7") == 0
    assert (tmp_path / "a/epoch_001.ckpt").read_bytes() == (tmp_path / "b/epoch_001.ckpt").read_bytes()
    assert (tmp_path / "a/report.txt").read_text() == (tmp_path / "b/report.txt").read_text()


def test_train_missing_manifest(corpus, tmp_path, capsys):
    code = cli.main(["train", str(tmp_path / "nope.csv"), str(corpus / "labels.txt")])
    assert code == 2 and "nope.csv" in capsys.readouterr().err


def test_usage_errors(capsys):
    assert cli.main(["train"]) == 1
    assert cli.main(["bogus"]) == 1
    assert cli.main(["train", "m", "l", "--mode", "both"]) == 1


def test_config_file_and_flag_precedence(corpus, tmp_path):
    cfg = tmp_path / "cfg.txt"
    cfg.write_text("# tiny run\nepochs=3\nfilters=2\nhidden=4\nbatch-size=4\nbalance=false\n")
    args = cli.parse_args(["train", "m", "l", "--config", str(cfg), "--epochs", "1"])
    assert (args.epochs, args.filters, args.balance) == (1, 2, False)
    args = cli.parse_args(["train", "m", "l", "--config", str(cfg)])
    assert args.epochs == 3


def test_config_file_bad_key(tmp_path):
    cfg = tmp_path / "cfg.txt"
    cfg.write_text("nonsense=1\n")
    assert cli.main(["train", "m", "l", "--config", str(cfg)]) == 1


def test_help_lists_reference_defaults(capsys):
    with pytest.raises(SystemExit) as exc:
        cli.build_parser().parse_args(["train", "--help"])
    assert exc.value.code == 0
    text = " ".join(capsys.readouterr().out.split())
    for flag, value in [("--lr", "0.001"), ("--filters", "64"), ("--hidden", "128"),
                        ("--blocks", "3"), ("--pool", "attention")]:
        assert flag in text and f"reference default: {value}" in text


@pytest.mark.parametrize("command", ["extract", "train", "tag", "detect", "evaluate", "fuse",
                                     "synth"])
def test_every_option_shows_a_default(command, capsys):
    parser = cli._subparser(cli.build_parser(), command)
    options = [a for a in parser._actions if a.option_strings and a.dest != "help"]
    text = " ".join(parser.format_help().split())
    required = sum(a.required for a in options)
    assert text.count("default:") == len(options) - required
    assert text.count("(required)") == required


def test_tag_rows_and_scores(corpus, run, tmp_path):
    out = tmp_path / "p.csv"
    code = cli.main(["tag", str(run / "epoch_002.ckpt"), "--manifest", str(corpus / "manifest.csv"),
                     "--labels", str(corpus / "labels.txt"), "--out", str(out),
                     "--reference", str(corpus / "manifest.csv")])
    assert code == 0
    assert len(read_posteriors(out)) == 8
    assert "f1" in parse_report((tmp_path / "p.csv.scores.txt").read_text())


def test_tag_fuse_identical_checkpoints(corpus, run, tmp_path):
    ck = str(run / "epoch_002.ckpt")
    common = ["--manifest", str(corpus / "manifest.csv"), "--labels", str(corpus / "labels.txt")]
    assert cli.main(["tag", ck, *common, "--out", str(tmp_path / "one.csv")]) == 0
    assert cli.main(["tag", ck, ck, "--fuse", *common, "--out", str(tmp_path / "two.csv")]) == 0
    assert (tmp_path / "one.csv").read_text() == (tmp_path / "two.csv").read_text()
    assert cli.main(["tag", ck, ck, *common, "--out", str(tmp_path / "x.csv")]) == 1


def test_detect_curves_and_determinism(corpus, run, tmp_path):
    common = [str(run / "epoch_002.ckpt"), "--manifest", str(corpus / "manifest.csv"),
              "--labels", str(corpus / "labels.txt")]
    assert cli.main(["detect", *common, "--out", str(tmp_path / "a.tsv"),
                     "--emit-curves", str(tmp_path / "curves")]) == 0
    assert cli.main(["detect", *common, "--out", str(tmp_path / "b.tsv")]) == 0
    assert (tmp_path / "a.tsv").read_bytes() == (tmp_path / "b.tsv").read_bytes()
    lines = (tmp_path / "curves" / "synth0000.csv").read_text().splitlines()
    assert lines[0] == "frame,class_name,O,Z_loc,O_prime"
    assert len(lines) - 1 == 240 * 2


def test_detect_silence_gives_empty_event_file(corpus, run, tmp_path):
    silent = tmp_path / "silent"
    (silent / "wav").mkdir(parents=True)
    write_wav(silent / "wav" / "quiet.wav", np.zeros(160000))
    assert cli.main(["extract", str(silent / "wav"), str(silent / "features")]) == 0
    (silent / "manifest.csv").write_text("quiet,features/quiet.feat,\n")
    shutil.copy(corpus / "labels.txt", silent / "labels.txt")
    # theta close to 1 so an under-trained model stays silent on silence
    code = cli.main(["detect", str(run / "epoch_002.ckpt"), "--manifest",
                     str(silent / "manifest.csv"), "--labels", str(silent / "labels.txt"),
                     "--theta", "0.999", "--out", str(tmp_path / "e.tsv")])
    assert code == 0 and (tmp_path / "e.tsv").read_text() == ""


def test_evaluate_sed(corpus, tmp_path, capsys):
    labels = str(corpus / "labels.txt")
    ref = corpus / "events.tsv"
    assert cli.main(["evaluate", str(ref), str(ref), "--labels", labels, "--task", "sed"]) == 0
    rep = parse_report(capsys.readouterr().out)
    assert rep["f1"] == 100 and rep["er"] == 0
    (tmp_path / "r.tsv").write_text("c\t2.000\t5.000\ttone00\n")
    (tmp_path / "p.tsv").write_text("c\t2.000\t5.000\ttone01\n")
    assert cli.main(["evaluate", str(tmp_path / "p.tsv"), str(tmp_path / "r.tsv"), "--labels",
                     labels, "--task", "sed", "--out", str(tmp_path / "rep.txt")]) == 0
    rep = parse_report((tmp_path / "rep.txt").read_text())
    assert (rep["S"], rep["N"], rep["er"], rep["f1"]) == (3, 3, 1.0, 0.0)


def test_evaluate_tagging(corpus, tmp_path, capsys):
    labels = str(corpus / "labels.txt")
    (tmp_path / "ref.csv").write_text("a,x.feat,tone00\nb,x.feat,tone01\n")
    (tmp_path / "good.csv").write_text("a,0.9,0.1\nb,0.2,0.8\n")
    (tmp_path / "bad.csv").write_text("a,0.1,0.9\nb,0.8,0.2\n")
    assert cli.main(["evaluate", str(tmp_path / "good.csv"), str(tmp_path / "ref.csv"),
                     "--labels", labels]) == 0
    assert parse_report(capsys.readouterr().out)["f1"] == 100
    assert cli.main(["evaluate", str(tmp_path / "bad.csv"), str(tmp_path / "ref.csv"),
                     "--labels", labels]) == 0
    assert parse_report(capsys.readouterr().out)["f1"] == 0
    (tmp_path / "other.csv").write_text("z,0.9,0.1\n")
    assert cli.main(["evaluate", str(tmp_path / "other.csv"), str(tmp_path / "ref.csv"),
                     "--labels", labels]) == 2


def test_fuse_files(tmp_path):
    (tmp_path / "a.csv").write_text("c1,0.300000\nc2,1.000000\n")
    (tmp_path / "b.csv").write_text("c1,0.500000\nc2,1.000000\n")
    assert cli.main(["fuse", str(tmp_path / "a.csv"), str(tmp_path / "b.csv"),
                     "--out", str(tmp_path / "f.csv")]) == 0
    assert (tmp_path / "f.csv").read_text() == "c1,0.400000\nc2,1.000000\n"
    assert cli.main(["fuse", str(tmp_path / "a.csv"), "--out", str(tmp_path / "g.csv")]) == 0
    assert (tmp_path / "g.csv").read_text() == (tmp_path / "a.csv").read_text()
    (tmp_path / "c.csv").write_text("c9,0.1\n")
    assert cli.main(["fuse", str(tmp_path / "a.csv"), str(tmp_path / "c.csv")]) == 2
