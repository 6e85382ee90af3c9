import json

import pytest

from flatmatch.backbone import init_seeded, save_weights
from flatmatch.cli import loglog_slope, main, read_config
from flatmatch.matcher import parse_matches

FAST = ["--coarse-blocks", "1", "--conf-threshold", "0"]


def run(argv, capsys):
    code = main([str(a) for a in argv])
    out, err = capsys.readouterr()
    return code, out, err


class TestMatch:
    def test_writes_file_and_reports(self, image_pair, tmp_path, capsys):
        a, b = image_pair
        out = tmp_path / "m.tsv"
        code, _, err = run(["match", a, b, "-o", out, *FAST], capsys)
        assert code == 0
        assert out.read_text().startswith("# xa\tya\txb\tyb\tconf\n")
        assert f"matches={len(parse_matches(out.read_text()))}" in err

    def test_jsonl_matches_tsv(self, image_pair, capsys):
        a, b = image_pair
        _, tsv, _ = run(["match", a, b, *FAST], capsys)
        _, jsonl, _ = run(["match", a, b, "--format", "jsonl", *FAST], capsys)
        assert parse_matches(tsv) == parse_matches(jsonl)
        for line in jsonl.splitlines():
            assert set(json.loads(line)) == {"xa", "ya", "xb", "yb", "conf"}

    @pytest.mark.parametrize("variant", ["softmax", "linear", "focused"])
    def test_variants(self, image_pair, variant, capsys):
        a, b = image_pair
        code, out, _ = run(["match", a, b, "--variant", variant, *FAST], capsys)
        assert code == 0 and out

    def test_missing_file_is_usage_error(self, image_pair, tmp_path, capsys):
        code, _, err = run(["match", image_pair[0], tmp_path / "nope.pgm"], capsys)
        assert code == 2 and "nope.pgm" in err

    def test_bad_threads(self, image_pair, capsys):
        assert run(["match", *image_pair, "--threads", "0"], capsys)[0] == 2

    def test_weights_file(self, image_pair, tmp_path, capsys):
        path = tmp_path / "w.bin"
        save_weights(path, init_seeded(0))
        with_file = run(["match", *image_pair, "--weights", path, *FAST], capsys)
        assert with_file[0] == 0

    def test_failed_run_keeps_old_output(self, tmp_path, capsys):
        out = tmp_path / "m.tsv"
        out.write_text("previous\n")
        code, _, _ = run(["match", tmp_path / "x.pgm", tmp_path / "y.pgm", "-o", out], capsys)
        assert code == 2 and out.read_text() == "previous\n"


class TestConfig:
    def test_parse(self, tmp_path):
        path = tmp_path / "c.cfg"
        path.write_text("# comment\npairs = 3\n\nconf-threshold=0.5  # trailing\n")
        assert read_config(path) == {"pairs": "3", "conf_threshold": "0.5"}

    def test_flag_overrides_file(self, tmp_path, capsys):
        cfg = tmp_path / "c.cfg"
        cfg.write_text("pairs=0\n")
        assert run(["eval", "--config", cfg], capsys)[0] == 2
        code, out, _ = run(["eval", "--config", cfg, "--pairs", "1"], capsys)
        assert code == 0 and len(json.loads(out)["per_pair"]) == 1

    def test_unknown_key(self, tmp_path, capsys):
        cfg = tmp_path / "c.cfg"
        cfg.write_text("colour=blue\n")
        code, _, err = run(["eval", "--config", cfg], capsys)
        assert code == 2 and "colour" in err

    def test_bad_value(self, tmp_path, capsys):
        cfg = tmp_path / "c.cfg"
        cfg.write_text("pairs=many\n")
        assert run(["eval", "--config", cfg], capsys)[0] == 2

    def test_malformed_line(self, tmp_path, capsys):
        cfg = tmp_path / "c.cfg"
        cfg.write_text("just words\n")
        assert run(["eval", "--config", cfg], capsys)[0] == 2


class TestEval:
    def test_report(self, tmp_path, capsys):
        out = tmp_path / "r.json"
        code, _, err = run(["eval", "--pairs", "2", "--seed", "3", "-o", out], capsys)
        rep = json.loads(out.read_text())
        assert code == 0 and "AUC@5=" in err
        assert [p["seed"] for p in rep["per_pair"]] == [3, 4]

    def test_zero_pairs(self, capsys):
        assert run(["eval", "--pairs", "0"], capsys)[0] == 2

    def test_zero_baseline(self, capsys):
        assert run(["eval", "--pairs", "1", "--baseline", "0"], capsys)[0] == 2


class TestBench:
    def test_csv(self, capsys):
        code, out, err = run(["bench", "--variants", "focused,softmax", "--sizes", "64,128", "--dim", "8"],
                             capsys)
        lines = out.splitlines()
        assert code == 0 and lines[0] == "variant,N,d,median_seconds"
        assert [l.split(",")[:3] for l in lines[1:]] == [
            ["focused", "64", "8"], ["focused", "128", "8"], ["softmax", "64", "8"], ["softmax", "128", "8"]]
        assert "slope focused" in err and "slope softmax" in err

    @pytest.mark.parametrize("argv", [["--reps", "2"], ["--sizes", "64"], ["--sizes", "128,64"],
                                      ["--variants", "bogus", "--sizes", "8,16"]])
    def test_rejects(self, argv, capsys):
        assert run(["bench", *argv], capsys)[0] == 2

    def test_slope_of_power_law(self):
        n = [10, 20, 40, 80]
        assert loglog_slope(n, [x ** 1.5 for x in n]) == pytest.approx(1.5)


class TestGradcheck:
    def test_default_passes(self, capsys):
        code, out, _ = run(["gradcheck", "--seeds", "1"], capsys)
        assert code == 0 and "5/5 passed" in out

    def test_coarse_step_fails(self, capsys):
        code, out, _ = run(["gradcheck", "--seeds", "1", "--variants", "softmax", "--h", "1e-1"], capsys)
        assert code == 1 and "FAIL" in out

    def test_unknown_variant(self, capsys):
        assert run(["gradcheck", "--variants", "cubic"], capsys)[0] == 2


class TestSelftest:
    def test_single_module(self, capsys):
        code, out, _ = run(["selftest", "--module", "numgrid"], capsys)
        assert code == 0 and "numgrid" in out and "matcher" not in out

    def test_corrupted_weights(self, tmp_path, capsys):
        path = tmp_path / "w.bin"
        save_weights(path, init_seeded(0))
        path.write_bytes(path.read_bytes()[:300])
        code, out, _ = run(["selftest", "--module", "backbone", "--module", "numgrid", "--weights", path],
                           capsys)
        assert code == 1
        assert "offset" in out and "numgrid" in out

    def test_unknown_module(self, capsys):
        assert run(["selftest", "--module", "nope"], capsys)[0] == 2


def test_no_command(capsys):
    assert run([], capsys)[0] == 2
