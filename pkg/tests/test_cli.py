import json
import subprocess
import sys

import numpy as np
import pytest

from ditehrnet.cli import main
from ditehrnet.tensor import load_fixture, save_fixture


def run(capsys, *argv):
    code = main(list(argv))
    out = capsys.readouterr()
    return code, out.out, out.err


class TestCommands:
    def test_analyze_default(self, capsys):
        code, out, _ = run(capsys, "analyze", "--variant", "18", "--input", "256x192")
        assert code == 0
        assert "1.0960 M" in out and "205.72 M" in out

    def test_analyze_json_and_csv(self, capsys, tmp_path):
        code, out, _ = run(capsys, "analyze", "--format", "json")
        assert code == 0 and json.loads(out)["totals"]["params"] == 1096007
        path = tmp_path / "r.csv"
        assert run(capsys, "analyze", "--format", "csv", "-o", str(path))[0] == 0
        assert path.read_text().startswith("name,kind,stage")

    def test_summary(self, capsys):
        code, out, _ = run(capsys, "summary", "--config", "tiny.json", "--format", "json")
        assert code == 0 and len(json.loads(out)["stages"]) == 2

    def test_sweep(self, capsys):
        code, out, _ = run(capsys, "sweep", "--variant", "18", "--format", "json")
        rows = json.loads(out)
        assert code == 0 and len(rows) == 16

    def test_verify_exit_codes(self, capsys):
        assert run(capsys, "verify", "--table", "table6")[0] == 0
        code, out, _ = run(capsys, "verify", "--table", "table5")
        assert code == 1 and "FAIL" in out

    def test_verify_custom_file(self, capsys, tmp_path):
        p = tmp_path / "e.csv"
        p.write_text("config_id,input_h,input_w,params,mflops,tol_params,tol_flops\n"
                     "dite-18,256,192,2.2,205.72,0.05,0.02\n")
        code, out, _ = run(capsys, "verify", "--expectations", str(p))
        assert code == 1 and "stage" not in out.splitlines()[0]

    def test_forward_is_deterministic(self, capsys):
        a = run(capsys, "forward", "--config", "tiny.json", "--seed", "7", "--format", "json")
        b = run(capsys, "forward", "--config", "tiny.json", "--seed", "7", "--format", "json")
        assert a[0] == b[0] == 0
        assert json.loads(a[1])["sha256"] == json.loads(b[1])["sha256"]
        c = run(capsys, "forward", "--config", "tiny.json", "--seed", "8", "--format", "json")
        assert json.loads(c[1])["sha256"] != json.loads(a[1])["sha256"]

    def test_forward_fixture(self, capsys, tmp_path):
        x = np.random.default_rng(0).standard_normal((1, 3, 32, 32)).astype(np.float32)
        src, hm = tmp_path / "x.bin", tmp_path / "hm.bin"
        save_fixture(src, x)
        code, _, _ = run(capsys, "forward", "--config", "tiny.json", "--fixture", str(src),
                         "--save-heatmaps", str(hm))
        assert code == 0 and load_fixture(hm).shape == (1, 3, 8, 8)

    def test_config_dir_env(self, capsys, tmp_path, monkeypatch):
        (tmp_path / "mine.json").write_text(json.dumps({"variant": "18", "widths": [20, 40, 80, 160],
                                                        "stem_width": 20}))
        monkeypatch.setenv("DITEHRNET_CONFIG_DIR", str(tmp_path))
        code, out, _ = run(capsys, "summary", "--config", "mine.json", "--format", "brief")
        assert code == 0 and "widths [20, 40, 80, 160]" in out

    def test_gradcheck_subset(self, capsys):
        code, out, _ = run(capsys, "gradcheck", "--only", "gcm", "--only", "dsc")
        assert code == 0 and out.count("PASS") == 2


class TestUsageErrors:
    @pytest.mark.parametrize("argv", [
        ["analyze", "--bogus"],
        ["analyze", "--input", "256by192"],
        ["analyze", "--variant", "50"],
        [],
    ])
    def test_bad_flags(self, argv):
        with pytest.raises(SystemExit) as e:
            main(argv)
        assert e.value.code == 2

    def test_missing_files(self, capsys, tmp_path):
        assert run(capsys, "analyze", "--config", "nope.json")[0] == 2
        assert run(capsys, "forward", "--config", "tiny.json", "--fixture", str(tmp_path / "x.bin"))[0] == 2
        assert run(capsys, "verify", "--expectations", str(tmp_path / "e.csv"))[0] == 2

    def test_bad_config_content(self, capsys, tmp_path):
        p = tmp_path / "bad.json"
        p.write_text(json.dumps({"variant": "18", "G": [1, 1]}))
        code, _, err = run(capsys, "analyze", "--config", str(p))
        assert code == 2 and "G needs one entry" in err

    def test_indivisible_input(self, capsys):
        assert run(capsys, "forward", "--config", "tiny.json", "--input", "30x30")[0] == 2


def test_console_script_entry_point():
    out = subprocess.run([sys.executable, "-m", "ditehrnet.cli", "verify", "--table", "table6"],
                         capture_output=True, text=True)
    assert out.returncode == 0 and "2/2 expectations met" in out.stdout
