import csv
import hashlib
from pathlib import Path

import pytest

from milore.cli import main
from milore.config import ConfigError, ConfigParseError, load_config, parse_text

ROOT = Path(__file__).resolve().parent.parent

TINY = (ROOT / "configs" / "tiny.cfg").read_text().replace("output: str = runs/tiny", "output: str = {out}")


def write_cfg(tmp_path, text=None, out=None):
    path = tmp_path / "run.cfg"
    path.write_text((text if text is not None else TINY).format(out=out or tmp_path / "out"))
    return path


def tree_digest(root: Path) -> dict[str, str]:
    return {str(p.relative_to(root)): hashlib.sha256(p.read_bytes()).hexdigest() for p in sorted(root.rglob("*")) if p.is_file()}


class TestConfig:
    def test_error_carries_line_number(self, tmp_path, capsys):
        text = TINY.replace("n_layers: int = 2", "n_layers: int = two")
        code = main(["count-params", "-c", str(write_cfg(tmp_path, text))])
        line = TINY.splitlines().index("n_layers: int = 2") + 1
        assert code == 2
        assert f"run.cfg:{line}:" in capsys.readouterr().err

    def test_unknown_key(self, tmp_path):
        with pytest.raises(ConfigParseError, match="unknown key"):
            parse_text("[encoder]\nd_modle: int = 4\n", "x.cfg")

    def test_unknown_section(self):
        with pytest.raises(ConfigParseError):
            parse_text("[encodr]\nd_model: int = 4\n", "x.cfg")

    def test_duplicate_key(self):
        with pytest.raises(ConfigParseError, match="x.cfg:3"):
            parse_text("[encoder]\nd_model: int = 4\nd_model: int = 8\n", "x.cfg")

    def test_missing_path(self, tmp_path):
        with pytest.raises(ConfigError):
            parse_text("[run]\noutput: path = does/not/exist\n", "x.cfg", tmp_path)

    def test_typed_lists(self):
        raw = parse_text("[kmeans]\nseeds: list[int] = 4, 5,6\n", "x.cfg")
        assert raw.sections["kmeans"]["seeds"].value == [4, 5, 6]

    def test_output_precedence(self, tmp_path, monkeypatch):
        path = write_cfg(tmp_path)
        assert load_config(path).output == tmp_path / "out"
        monkeypatch.setenv("MILORE_OUTPUT_ROOT", str(tmp_path / "env"))
        assert load_config(path).output == tmp_path / "env"
        assert load_config(path, str(tmp_path / "flag")).output == tmp_path / "flag"

    def test_dry_run_writes_nothing(self, tmp_path, capsys):
        path = write_cfg(tmp_path)
        for cmd in ("gen-data", "pretrain", "sweep"):
            assert main([cmd, "-c", str(path), "--dry-run"]) == 0
        assert not (tmp_path / "out").exists()
        assert "data/A/train.tsv" in capsys.readouterr().out


def test_count_params_on_large_shape(capsys, tmp_path):
    assert main(["count-params", "-c", str(ROOT / "configs" / "hubert_large.cfg"), "--output", str(tmp_path)]) == 0
    out = dict(line.split("\t") for line in capsys.readouterr().out.splitlines())
    assert 1.8 <= float(out["fraction"].rstrip("%")) <= 2.6


def test_missing_prerequisite_is_a_runtime_error(tmp_path, capsys):
    assert main(["pretrain", "-c", str(write_cfg(tmp_path))]) == 1
    assert "gen-data" in capsys.readouterr().err


@pytest.fixture(scope="module")
def pipeline(tmp_path_factory):
    tmp = tmp_path_factory.mktemp("pipe")
    cfg = str(write_cfg(tmp))
    steps = [
        ["gen-data"], ["kmeans", "--stage", "base"], ["pretrain"], ["kmeans", "--stage", "continual"],
        ["continual"], ["probe"], ["activation"], ["sweep"],
    ]
    codes = [main(s + ["-c", cfg]) for s in steps]
    return tmp, cfg, codes


class TestPipeline:
    def test_every_stage_succeeds(self, pipeline):
        assert pipeline[2] == [0] * 8

    def test_artifacts(self, pipeline):
        out = pipeline[0] / "out"
        for rel in ("data/A/train.tsv", "data/B/heldout.tsv", "kmeans/base.bin", "kmeans/continual.bin",
                    "checkpoints/base/hashes.json", "checkpoints/continual/params.bin",
                    "reports/probe-continual/probes.csv", "reports/activation/activation.csv"):
            assert (out / rel).is_file(), rel

    def test_sweep_has_six_rows(self, pipeline):
        rows = list(csv.reader(open(pipeline[0] / "out" / "reports" / "sweep" / "ablation.csv")))
        assert rows[0] == ["lora_rank", "n_experts", "trainable", "A", "B", "avg"]
        assert [(int(r[0]), int(r[1])) for r in rows[1:]] == [(12, 2), (8, 3), (6, 4), (4, 6), (3, 8), (2, 12)]

    def test_rerun_is_idempotent(self, pipeline):
        tmp, cfg, _ = pipeline
        out = tmp / "out"
        before = tree_digest(out)
        for s in (["gen-data"], ["kmeans", "--stage", "base"], ["pretrain"], ["continual"], ["probe"]):
            assert main(s + ["-c", cfg]) == 0
        assert tree_digest(out) == before
