import json

import pytest

from splitdecode.cli import main
from splitdecode.config import ConfigError, default_run_config, load_run_config


def write_config(tmp_path, data, name="config.json"):
    path = tmp_path / name
    path.write_text(json.dumps(data), encoding="utf-8")
    return str(path)


class TestConfig:
    def test_defaults_parse(self):
        cfg = default_run_config()
        assert cfg.model.d_model == cfg.model.n_heads * cfg.model.head_dim
        assert cfg.obfuscation.lambda_min <= cfg.obfuscation.lambda_max

    def test_unknown_top_level_key(self, tmp_path):
        path = write_config(tmp_path, {"modle": {}})
        with pytest.raises(ConfigError, match="modle"):
            load_run_config(path)

    def test_unknown_nested_key(self, tmp_path):
        path = write_config(tmp_path, {"model": {"n_layres": 2}})
        with pytest.raises(ConfigError, match="n_layres"):
            load_run_config(path)

    def test_seed_override(self, tmp_path):
        path = write_config(tmp_path, {"model": {"seed": 1}})
        cfg = load_run_config(path, seed=99)
        assert cfg.model.seed == 99
        assert cfg.bench["model"].seed == 99

    def test_missing_file(self):
        with pytest.raises(ConfigError):
            load_run_config("/nonexistent/config.json")

    def test_invalid_json(self, tmp_path):
        path = tmp_path / "bad.json"
        path.write_text("{not json", encoding="utf-8")
        with pytest.raises(ConfigError):
            load_run_config(str(path))

    def test_invalid_model_values(self, tmp_path):
        path = write_config(tmp_path, {"model": {"d_model": 10}})
        with pytest.raises(ConfigError):
            load_run_config(path)


class TestDemoCommand:
    def test_default_demo_passes(self, capsys):
        assert main(["demo"]) == 0
        out = capsys.readouterr().out
        assert "invariance check" in out
        assert "authentic response" in out

    def test_demo_transcript_deterministic(self, tmp_path, capsys):
        out1 = tmp_path / "t1.txt"
        out2 = tmp_path / "t2.txt"
        assert main(["demo", "--seed", "3", "--out", str(out1)]) == 0
        assert main(["demo", "--seed", "3", "--out", str(out2)]) == 0
        assert out1.read_bytes() == out2.read_bytes()

    def test_demo_obfuscation_abort_exit_code(self, tmp_path, capsys):
        # the demo corpus cannot yield 500 decoys; lambda_min forces a halt
        path = write_config(
            tmp_path, {"obfuscation": {"lambda_min": 500, "lambda_max": 600}}
        )
        assert main(["demo", "--config", path]) == 3

    def test_demo_unknown_key_exit_code(self, tmp_path, capsys):
        path = write_config(tmp_path, {"bogus_section": {}})
        assert main(["demo", "--config", path]) == 2

    def test_verbose_shows_virtual_prompts(self, capsys):
        assert main(["demo", "-v"]) == 0
        assert "authentic_idx" in capsys.readouterr().out


class TestVerifyCommand:
    @pytest.mark.parametrize("suite", ["theorem1", "bounds"])
    def test_suites_pass(self, suite, capsys):
        assert main(["verify", suite]) == 0
        out = capsys.readouterr().out
        assert "PASS" in out and "FAIL" not in out


class TestBenchCommand:
    def test_bench_writes_sorted_csv(self, tmp_path, capsys):
        path = write_config(
            tmp_path,
            {
                "bench": {
                    "users": [1, 2],
                    "modes": ["no_protection", "full_isolation", "spd"],
                    "lambdas": [0, 1],
                    "in_tokens": 4,
                    "out_tokens": 4,
                    "repetitions": 3,
                    "model": {
                        "n_layers": 1,
                        "n_heads": 1,
                        "d_model": 16,
                        "head_dim": 16,
                        "vocab_size": 16,
                        "max_seq": 16,
                        "seed": 2,
                    },
                }
            },
        )
        out_csv = tmp_path / "bench.csv"
        assert main(["bench", "--config", path, "--out", str(out_csv)]) == 0
        lines = out_csv.read_text().strip().splitlines()
        assert lines[0].startswith("mode,users,lambda,")
        assert len(lines) == 1 + 12  # 3 modes x 2 users x 2 lambdas
        rows = [line.split(",")[:3] for line in lines[1:]]
        assert rows == sorted(rows)

        # re-running is identical outside the timing columns
        out_csv2 = tmp_path / "bench2.csv"
        assert main(["bench", "--config", path, "--out", str(out_csv2)]) == 0
        timing = {5, 6}  # ms_per_token_med, ms_per_token_p95
        for line1, line2 in zip(lines, out_csv2.read_text().strip().splitlines()):
            kept1 = [f for i, f in enumerate(line1.split(",")) if i not in timing]
            kept2 = [f for i, f in enumerate(line2.split(",")) if i not in timing]
            assert kept1 == kept2
