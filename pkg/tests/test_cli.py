import pytest

from leakfix.cli import main
from leakfix.model import COMPONENTS

KERNEL = ".data d 0x1000 4\nldr r1, [r2]\neors r1, r3\n"


@pytest.fixture
def asm(tmp_path):
    p = tmp_path / "k.s"
    p.write_text(KERNEL)
    return p


def test_check(asm, tmp_path, capsys):
    assert main(["check", str(asm)]) == 0
    assert "ok, 2 instructions" in capsys.readouterr().out
    bad = tmp_path / "bad.s"
    bad.write_text("movs r7, r1\n")
    assert main(["check", str(bad)]) == 1
    assert "mask-register-reserved" in capsys.readouterr().err


def test_trace(asm, capsys):
    assert main(["trace", "--asm", str(asm), "--binding", "raw:d", "--reg", "r2=0x1000"]) == 0
    rows = capsys.readouterr().out.strip().splitlines()
    assert rows[0].split(",") == ["slot", "mnemonic", "total", *COMPONENTS]
    assert len(rows) == 3


def test_campaign_then_rewrite(asm, tmp_path, capsys):
    report = tmp_path / "r.csv"
    assert main(["campaign", "--asm", str(asm), "--binding", "raw:d", "--reg", "r2=0x1000",
                 "--traces", "2000", "--out", str(report)]) == 0
    assert "slots flagged" in capsys.readouterr().out
    out = tmp_path / "fixed.s"
    assert main(["rewrite", str(asm), str(report), "-o", str(out)]) == 0
    err = capsys.readouterr().err
    assert "iterations: 1" in err
    assert len(out.read_text().strip().splitlines()) > 2


def test_run_corpus(tmp_path, capsys):
    code = main(["run", "--corpus", "bus-bytes", "--final-traces", "20000",
                 "--out", str(tmp_path / "o")])
    text = capsys.readouterr().out
    assert code == 0 and "leaks_remaining = 0" in text
    assert (tmp_path / "o" / "fixed.s").exists()


def test_run_reports_remaining_leaks(asm, capsys):
    # an unmasked load into a register whose base it overwrites cannot be shadowed
    code = main(["run", "--asm", str(asm), "--binding", "raw:d", "--reg", "r2=0x1000",
                 "--traces", "2000", "--final-traces", "2000", "--max-iterations", "2"])
    assert code == 2
    assert "leaks_remaining" in capsys.readouterr().out


def test_trend(capsys):
    assert main(["trend", "--corpus", "quarter-round", "--counts", "1,2", "--repeats", "2",
                 "--traces", "2000"]) == 0
    assert capsys.readouterr().out.startswith("n_fixed")


def test_matrix_subset(tmp_path, capsys):
    csv = tmp_path / "m.csv"
    assert main(["matrix", "--runs", "2000", "--instructions", "eors,str", "--csv", str(csv)]) == 0
    out = capsys.readouterr().out.splitlines()
    assert [line.split() for line in out] == [["eors", "o", "^"], ["str", "<", "o"]]
    assert csv.read_text().count("\n") == 5
    with pytest.raises(SystemExit):
        main(["matrix", "--instructions", "eors,frob"])


@pytest.mark.parametrize("argv", [
    ["trace", "--asm", "/nonexistent.s", "--binding", "raw:d"],
    ["trace", "--corpus", "nope"],
    ["trace", "--corpus", "bus-bytes", "--model", "/nonexistent.cfg"],
])
def test_errors_exit_1(argv, capsys):
    assert main(argv) == 1
    assert capsys.readouterr().err.startswith("leakfix:")


def test_bad_model_file(tmp_path, capsys):
    cfg = tmp_path / "m.cfg"
    cfg.write_text("alu.bogus = 1\n")
    assert main(["trace", "--corpus", "bus-bytes", "--model", str(cfg)]) == 1
