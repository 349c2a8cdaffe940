import json
import subprocess
import sys

import pytest

from isochrony_st.cli import main
from isochrony_st.data import Vocabulary, prepare_target, read_corpus
from isochrony_st.inference import Hypothesis, decoded_record, greedy_decode, read_decoded, write_decoded
from isochrony_st.model import load_checkpoint

CORPUS_CFG = "n_train = 6\nn_dev = 2\nn_test = 4\nseed = 3\n"
MODEL_CFG = ("d_model = 16\ntext_dim = 16\ntiming_dim = 4\nff_dim = 32\nenc_layers = 1\ndec_layers = 1\n"
             "enc_heads = 2\ndec_heads = 2\n")
TRAIN_CFG = "steps = 3\nbatch_frames = 300\neval_interval = 3\n"


@pytest.fixture(scope="module")
def work(tmp_path_factory):
    d = tmp_path_factory.mktemp("cli")
    (d / "corpus.cfg").write_text(CORPUS_CFG)
    (d / "model.cfg").write_text(MODEL_CFG)
    (d / "train.cfg").write_text(TRAIN_CFG)
    assert main(["gen-data", "--out", str(d / "data"), "--config", str(d / "corpus.cfg")]) == 0
    assert main(["train", "--data", str(d / "data"), "--model-config", str(d / "model.cfg"), "--train-config",
                 str(d / "train.cfg"), "--out", str(d / "m.npz")]) == 0
    return d


def test_gen_data_outputs(work):
    data = work / "data"
    assert len(read_corpus(data / "test.jsonl")) == 4
    assert len(read_corpus(data / "train.jsonl")) == 6
    manifest = json.loads((data / "manifest.json").read_text())
    assert manifest["command"] == "gen-data" and manifest["seed"] == 3
    for p in manifest["outputs"]:
        assert (work / "data" / p.rsplit("/", 1)[-1]).exists()


def test_gen_data_byte_identical(work, tmp_path):
    assert main(["gen-data", "--out", str(tmp_path / "again"), "--config", str(work / "corpus.cfg")]) == 0
    for name in ("train.jsonl", "dev.jsonl", "test.jsonl", "vocab.txt"):
        assert (tmp_path / "again" / name).read_bytes() == (work / "data" / name).read_bytes()


def test_gen_data_missing_key(tmp_path, caplog):
    (tmp_path / "c.cfg").write_text("n_train = 3\nn_dev = 1\n")
    assert main(["gen-data", "--out", str(tmp_path / "o"), "--config", str(tmp_path / "c.cfg")]) == 2
    assert "n_test" in caplog.text


def test_unknown_config_key(work, tmp_path):
    (tmp_path / "t.cfg").write_text("steps = 2\nlearning_rate = 3\n")
    assert main(["train", "--data", str(work / "data"), "--train-config", str(tmp_path / "t.cfg"),
                 "--out", str(tmp_path / "m.npz")]) == 2


def test_train_outputs_and_manifest(work):
    model, _, _ = load_checkpoint(work / "m.npz")
    assert model.config.d_model == 16
    manifest = json.loads((work / "m.npz.manifest.json").read_text())
    assert manifest["config"]["train"]["noise_sigma"] == 0.0
    rows = (work / "m.npz.report.tsv").read_text().splitlines()
    assert rows[0].split("\t") == ["step", "token_loss", "dur_loss", "dev_overlap", "dev_acc"]


def test_noise_sigma_zero_equals_omitting(work, tmp_path):
    out = tmp_path / "z.npz"
    assert main(["train", "--data", str(work / "data"), "--model-config", str(work / "model.cfg"),
                 "--train-config", str(work / "train.cfg"), "--out", str(out), "--noise-sigma", "0"]) == 0
    a, _, _ = load_checkpoint(out)
    b, _, _ = load_checkpoint(work / "m.npz")
    assert all(a.params[k].data.tobytes() == b.params[k].data.tobytes() for k in a.params)
    s = tmp_path / "s.npz"
    assert main(["train", "--data", str(work / "data"), "--model-config", str(work / "model.cfg"),
                 "--train-config", str(work / "train.cfg"), "--out", str(s), "--noise-sigma", "0.75"]) == 0
    assert json.loads((tmp_path / "s.npz.manifest.json").read_text())["config"]["train"]["noise_sigma"] == 0.75


def test_translate_beam_one_is_greedy_and_rerun_identical(work, tmp_path):
    args = ["translate", "--ckpt", str(work / "m.npz"), "--data", str(work / "data" / "test.jsonl"),
            "--beam", "1", "--max-len", "12"]
    assert main(args + ["--out", str(tmp_path / "a.jsonl")]) == 0
    assert main(args + ["--out", str(tmp_path / "b.jsonl")]) == 0
    assert (tmp_path / "a.jsonl").read_bytes() == (tmp_path / "b.jsonl").read_bytes()
    model, _, _ = load_checkpoint(work / "m.npz")
    vocab = Vocabulary.read(work / "data" / "vocab.txt")
    corpus = read_corpus(work / "data" / "test.jsonl")
    recs = read_decoded(tmp_path / "a.jsonl")
    assert sorted(r["id"] for r in recs) == sorted(u.uid for u in corpus)
    for u, r in zip(corpus, recs):
        assert r["tokens"] == list(greedy_decode(model, u.features, u.total_frames, vocab, max_len=12).tokens)


def test_translate_default_beam(work, tmp_path):
    out = tmp_path / "d.jsonl"
    assert main(["translate", "--ckpt", str(work / "m.npz"), "--data", str(work / "data" / "dev.jsonl"),
                 "--max-len", "8", "--out", str(out)]) == 0
    assert json.loads((tmp_path / "d.jsonl.manifest.json").read_text())["config"]["beam"] == 5
    assert len(read_decoded(out)) == 2


def test_translate_shape_mismatch(work, tmp_path, caplog):
    (tmp_path / "v.txt").write_text("\n".join(Vocabulary(3, 2).tokens()) + "\n")
    code = main(["translate", "--ckpt", str(work / "m.npz"), "--data", str(work / "data" / "test.jsonl"),
                 "--vocab", str(tmp_path / "v.txt"), "--out", str(tmp_path / "x.jsonl")])
    assert code == 2 and "dec.emb" in caplog.text


def oracle_file(work, path):
    vocab = Vocabulary.read(work / "data" / "vocab.txt")
    recs = []
    for u in read_corpus(work / "data" / "test.jsonl"):
        pt = prepare_target(u)
        recs.append(decoded_record(u.uid, Hypothesis(tuple(map(int, pt.z)), tuple(map(float, pt.d))), vocab))
    write_decoded(path, recs)
    return recs


def test_evaluate_oracle(work, tmp_path, capsys):
    oracle_file(work, tmp_path / "o.jsonl")
    assert main(["evaluate", "--hyp", str(tmp_path / "o.jsonl"), "--data", str(work / "data" / "test.jsonl"),
                 "--out", str(tmp_path / "r.tsv")]) == 0
    out = capsys.readouterr().out
    assert "BLEU         100.00" in out and "overlap      1.000000000000" in out


def test_evaluate_summary_mean_matches_rows(work, tmp_path, capsys):
    recs = oracle_file(work, tmp_path / "o.jsonl")
    recs[1]["durations"] = [d * 1.3 for d in recs[1]["durations"]]
    write_decoded(tmp_path / "o.jsonl", recs)
    assert main(["evaluate", "--hyp", str(tmp_path / "o.jsonl"), "--data", str(work / "data" / "test.jsonl"),
                 "--out", str(tmp_path / "r.tsv")]) == 0
    lines = (tmp_path / "r.tsv").read_text().splitlines()
    col = lines[0].split("\t").index("overlap")
    mean = sum(float(line.split("\t")[col]) for line in lines[1:]) / (len(lines) - 1)
    summary = float(next(ln for ln in capsys.readouterr().out.splitlines() if ln.startswith("overlap ")).split()[1])
    assert abs(mean - summary) <= 1e-9


def test_evaluate_corrupted_and_mismatched(work, tmp_path, caplog):
    recs = oracle_file(work, tmp_path / "o.jsonl")
    text = (tmp_path / "o.jsonl").read_text().splitlines()
    text[2] = text[2][:20]
    (tmp_path / "bad.jsonl").write_text("\n".join(text) + "\n")
    assert main(["evaluate", "--hyp", str(tmp_path / "bad.jsonl"), "--data", str(work / "data" / "test.jsonl"),
                 "--out", str(tmp_path / "r.tsv")]) == 1
    assert ":3:" in caplog.text
    write_decoded(tmp_path / "short.jsonl", recs[:-1])
    assert main(["evaluate", "--hyp", str(tmp_path / "short.jsonl"), "--data", str(work / "data" / "test.jsonl"),
                 "--out", str(tmp_path / "r.tsv")]) == 2


def test_missing_input_is_io_error(tmp_path):
    assert main(["evaluate", "--hyp", str(tmp_path / "none.jsonl"), "--data", str(tmp_path / "x.jsonl"),
                 "--out", str(tmp_path / "r.tsv")]) == 1


@pytest.mark.filterwarnings("ignore::RuntimeWarning")
def test_nan_is_numeric_exit(work, tmp_path):
    (tmp_path / "t.cfg").write_text("steps = 2\nbase_lr = 1e308\nbatch_frames = 300\n")
    code = main(["train", "--data", str(work / "data"), "--model-config", str(work / "model.cfg"),
                 "--train-config", str(tmp_path / "t.cfg"), "--out", str(tmp_path / "m.npz")])
    assert code == 3


def test_inputs_not_mutated(work, tmp_path):
    before = {p.name: p.read_bytes() for p in (work / "data").glob("*.jsonl")}
    main(["translate", "--ckpt", str(work / "m.npz"), "--data", str(work / "data" / "dev.jsonl"), "--beam", "2",
          "--max-len", "5", "--out", str(tmp_path / "t.jsonl")])
    assert {p.name: p.read_bytes() for p in (work / "data").glob("*.jsonl")} == before


def test_bad_arguments_exit_2():
    assert main(["translate"]) == 2
    assert main(["no-such-command"]) == 2


def test_module_entry_point(work, tmp_path):
    proc = subprocess.run([sys.executable, "-m", "isochrony_st", "gen-data", "--out", str(tmp_path / "d"),
                           "--config", str(work / "corpus.cfg"), "--seed", "9"], capture_output=True, text=True)
    assert proc.returncode == 0, proc.stderr
    assert json.loads((tmp_path / "d" / "manifest.json").read_text())["seed"] == 9
