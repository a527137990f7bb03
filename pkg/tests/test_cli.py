import csv
import json

import numpy as np
import pytest

from egofilter.audio import read_wav
from egofilter.cli import dispatch
from egofilter.egonet import load_weights

NET = ["--channels", "2", "--dilations", "2,4"]


@pytest.fixture(scope="module")
def corpus(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    src, mixes = root / "src", root / "mix"
    assert dispatch(["synth", "--out-dir", str(src), "--n", "2", "--seed", "1"]) == 0
    assert dispatch(["mix", "--manifest", str(src / "manifest.jsonl"), "--out-dir", str(mixes)]) == 0
    w = root / "w.egof"
    assert dispatch(["train", "--manifest", str(src / "manifest.jsonl"), "--out", str(w), *NET,
                     "--batch-size", "2"]) == 0
    return root, src, mixes, w


def _rows(path):
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))


class TestExitCodes:
    def test_no_command(self):
        assert dispatch([]) == 1

    def test_unknown_flag(self):
        assert dispatch(["filter", "--bogus", "1"]) == 1

    def test_missing_required(self):
        assert dispatch(["filter", "--mode", "entire"]) == 1

    def test_bad_mode(self):
        assert dispatch(["filter", "--mode", "sideways"]) == 1

    def test_missing_weights_is_data_error(self, corpus, tmp_path, capsys):
        _, _, mixes, _ = corpus
        code = dispatch(["filter", "--robot", str(mixes / "ego_0.wav"), "--mic", str(mixes / "mixture_0.wav"),
                         "--weights", str(tmp_path / "nope.egof"), "--out", str(tmp_path / "o.wav")])
        assert code == 2
        assert "no ego estimate" in capsys.readouterr().err

    def test_missing_manifest(self, tmp_path):
        assert dispatch(["mix", "--manifest", str(tmp_path / "m.jsonl"), "--out-dir", str(tmp_path)]) == 2

    def test_bad_config_file(self, tmp_path):
        cfg = tmp_path / "c.yaml"
        cfg.write_text("not_a_field: 3\n")
        assert dispatch(["--config", str(cfg), "synth", "--out-dir", str(tmp_path)]) == 2


class TestConfig:
    def test_flag_beats_file(self, tmp_path):
        cfg = tmp_path / "c.yaml"
        cfg.write_text("n: 3\nseed: 4\n")
        assert dispatch(["--config", str(cfg), "synth", "--out-dir", str(tmp_path / "o"), "--n", "1"]) == 0
        snap = json.loads((tmp_path / "o" / "resolved_config_synth.json").read_text())
        assert (snap["n"], snap["seed"], snap["channels"]) == (1, 4, 128)
        assert len((tmp_path / "o" / "manifest.jsonl").read_text().splitlines()) == 1


class TestCorpusCommands:
    def test_mix_outputs(self, corpus):
        _, _, mixes, _ = corpus
        rows = _rows(mixes / "index.csv")
        assert [r["file"] for r in rows] == ["mixture_0.wav", "mixture_1.wav"]
        for i in range(2):
            m, e, t = (read_wav(mixes / f"{k}_{i}.wav") for k in ("mixture", "ego", "target"))
            assert len(m.samples) == len(e.samples) == len(t.samples)

    def test_train_deterministic(self, corpus, tmp_path):
        _, src, _, w = corpus
        again = tmp_path / "w2.egof"
        assert dispatch(["train", "--manifest", str(src / "manifest.jsonl"), "--out", str(again), *NET,
                         "--batch-size", "2"]) == 0
        assert again.read_bytes() == w.read_bytes()
        assert load_weights(again).config.channels == 2
        assert len(_rows(again.with_suffix(".loss.csv"))) == 1


class TestFilterCommands:
    def _args(self, corpus):
        _, _, mixes, w = corpus
        return ["--robot", str(mixes.parent / "src" / "robot_src_0.wav"),
                "--mic", str(mixes / "mixture_0.wav"), "--weights", str(w)]

    def test_entire_sidecar(self, corpus, tmp_path):
        out = tmp_path / "e.wav"
        assert dispatch(["filter", *self._args(corpus), "--mode", "entire", "--out", str(out)]) == 0
        side = json.loads((tmp_path / "e.wav.json").read_text())
        assert side["mode"] == "entire" and side["start_sample"] == side["onset_sample"]
        assert side["n_samples"] == len(read_wav(out).samples)

    @pytest.mark.parametrize("chunk_ms", [20, 100, 333])
    def test_blocks_equal_stream(self, corpus, tmp_path, chunk_ms):
        out = tmp_path / "b.wav"
        assert dispatch(["filter", *self._args(corpus), "--mode", "blocks", "--out", str(out)]) == 0
        sdir = tmp_path / "s"
        assert dispatch(["stream", *self._args(corpus), "--chunk-ms", str(chunk_ms), "--out-dir", str(sdir)]) == 0
        segs = sorted(sdir.glob("seg_*.wav"))
        assert segs
        joined = np.concatenate([read_wav(p).samples for p in segs])
        np.testing.assert_array_equal(joined, read_wav(out).samples)
        rows = _rows(sdir / "segments.csv")
        assert int(rows[0]["start_sample"]) == json.loads((tmp_path / "b.wav.json").read_text())["start_sample"]
        stages = [r["stage"] for r in _rows(sdir / "timings.csv")]
        assert stages[0] == "prepare" and stages.count("buffer") == len(segs)


class TestEvalCommands:
    def test_eval_then_cluster(self, corpus, tmp_path, capsys):
        _, src, mixes, w = corpus
        ext = tmp_path / "ext"
        for i in range(2):
            assert dispatch(["filter", "--robot", str(src / f"robot_src_{i}.wav"),
                             "--mic", str(mixes / f"mixture_{i}.wav"), "--weights", str(w),
                             "--out", str(ext / f"extracted_{i}.wav")]) == 0
        report = tmp_path / "r" / "report.csv"
        assert dispatch(["eval", "--extracted-dir", str(ext), "--reference-dir", str(mixes),
                         "--manifest", str(src / "manifest.jsonl"), "--out", str(report)]) == 0
        printed = json.loads(capsys.readouterr().out.strip().splitlines()[-1])
        assert printed["n_files"] == 2
        assert len(_rows(report)) == 2
        clusters = tmp_path / "c" / "clusters.csv"
        assert dispatch(["cluster", "--report", str(report), "--k", "2", "--out", str(clusters)]) == 0
        assert sorted(int(r["cluster"]) for r in _rows(clusters)) == [0, 1]
        # merges stop at k clusters: n - k = 0 rows here
        assert (clusters.parent / "merge_heights.csv").read_text().startswith("cluster_a,cluster_b,height,size")
        assert _rows(clusters.parent / "merge_heights.csv") == []

    def test_cluster_k_too_large(self, tmp_path):
        report = tmp_path / "r.csv"
        report.write_text("file_id,si_sdr_db,lsd_db,ar_target,snr_db,words_target,wer_percent,gender_code\n"
                          "a,1.0,1.0,1.0,-20.0,3,,\n")
        assert dispatch(["cluster", "--report", str(report), "--k", "4", "--out", str(tmp_path / "c.csv")]) == 2
