import json

import numpy as np
import pytest

from conftest import f32, random_inputs, small_cnn

from hptq.calibrate import ErrorMeasure
from hptq.cli import main
from hptq.container import CalibrationSet, load_model, save_dataset, save_model
from hptq.errors import PipelineError
from hptq.graph import Activation, Graph, GraphInput, Node
from hptq.pipeline import STAGE_NAMES, PipelineConfig, quantize_pipeline
from hptq.report import render_text, write_report
from hptq.stats import collect_statistics
from hptq.tensor import Tensor


def calib_for(rng, graph, n=8):
    return CalibrationSet(
        samples=[Tensor.from_array(x) for x in random_inputs(rng, graph, n)]
    )


def stage(report, name):
    for entry in report["stages"]:
        if entry["stage"] == name:
            return entry
    return None


class TestConfig:
    def test_defaults(self):
        cfg = PipelineConfig()
        assert cfg.bits == 8
        assert cfg.error_measure == ErrorMeasure.MSE
        assert cfg.z_threshold == 24.0
        assert cfg.snc_alpha == 0.25
        assert cfg.iterations == 10
        assert cfg.bins == 2048
        assert all(getattr(cfg, name) for name in STAGE_NAMES)

    def test_disable(self):
        cfg = PipelineConfig().disable(["snc", "equalization"])
        assert not cfg.snc and not cfg.equalization
        assert cfg.bn_fold

    def test_disable_unknown_stage(self):
        with pytest.raises(ValueError, match="unknown stage"):
            PipelineConfig().disable(["frobnicate"])


class TestPipeline:
    def test_fills_every_quant_slot(self):
        rng = np.random.default_rng(0)
        g = small_cnn(rng)
        quant, report = quantize_pipeline(g, calib_for(rng, g), PipelineConfig(bins=128, iterations=4))
        quant.assert_fully_quantized()
        assert report["schema_version"] == 1
        assert stage(report, "per_layer_mse")["mean"] >= 0

    def test_stage_order(self):
        rng = np.random.default_rng(1)
        g = small_cnn(rng)
        _, report = quantize_pipeline(g, calib_for(rng, g), PipelineConfig(bins=128, iterations=4))
        names = [s["stage"] for s in report["stages"]]
        base = [n for n in names if n in (
            "bn_fold", "statistics", "outlier_removal", "activation_thresholds",
            "snc", "equalization", "weight_thresholds", "bias_correction", "per_layer_mse")]
        assert base == [
            "bn_fold", "statistics", "outlier_removal", "activation_thresholds",
            "snc", "equalization", "weight_thresholds", "bias_correction", "per_layer_mse",
        ]

    def test_selected_error_never_above_nc(self):
        rng = np.random.default_rng(2)
        g = small_cnn(rng)
        _, report = quantize_pipeline(g, calib_for(rng, g), PipelineConfig(bins=512, iterations=8))
        for r in stage(report, "activation_thresholds")["results"].values():
            assert r["error"] <= r["nc_error"]
            assert r["exponent"] <= r["nc_exponent"]
        for r in stage(report, "weight_thresholds")["results"].values():
            for err, nc_err in zip(r["errors"], r["nc_errors"]):
                assert err <= nc_err

    def test_nc_measure_skips_search(self):
        rng = np.random.default_rng(3)
        g = small_cnn(rng)
        cfg = PipelineConfig(error_measure=ErrorMeasure.NC, bins=128)
        _, report = quantize_pipeline(g, calib_for(rng, g), cfg)
        for r in stage(report, "activation_thresholds")["results"].values():
            assert r["evaluations"] == 0
            assert r["exponent"] == r["nc_exponent"]

    def test_baseline_config_uses_one_exponent_per_weight_tensor(self):
        """All enhancements off with NC: pure no-clipping per-tensor quantization."""
        rng = np.random.default_rng(4)
        g = small_cnn(rng)
        cfg = PipelineConfig(error_measure=ErrorMeasure.NC, bins=128).disable(
            [s for s in STAGE_NAMES if s != "bn_fold"]
        )
        quant, report = quantize_pipeline(g, calib_for(rng, g), cfg)
        assert stage(report, "outlier_removal") is None
        assert stage(report, "snc") is None
        assert stage(report, "equalization") is None
        assert stage(report, "bias_correction") is None
        for node in quant.nodes:
            if node.is_linear:
                assert len(set(node.weight_exponents.tolist())) == 1

    def test_deterministic_outputs(self, tmp_path):
        rng = np.random.default_rng(5)
        g = small_cnn(rng)
        calib = calib_for(rng, g)
        cfg = PipelineConfig(bins=256, iterations=6)
        (tmp_path / "a").mkdir()
        (tmp_path / "b").mkdir()
        from hptq.container import save_quantized

        qa, ra = quantize_pipeline(g, calib, cfg)
        qb, rb = quantize_pipeline(g, calib, cfg)
        save_quantized(qa, tmp_path / "a" / "m.json")
        save_quantized(qb, tmp_path / "b" / "m.json")
        assert (tmp_path / "a" / "m.json").read_bytes() == (tmp_path / "b" / "m.json").read_bytes()
        assert (tmp_path / "a" / "m.bin").read_bytes() == (tmp_path / "b" / "m.bin").read_bytes()
        assert json.dumps(ra, sort_keys=True) == json.dumps(rb, sort_keys=True)

    def test_empty_calibration_rejected(self):
        rng = np.random.default_rng(6)
        g = small_cnn(rng)
        with pytest.raises(PipelineError, match="calibration set empty"):
            quantize_pipeline(g, None, PipelineConfig())

    def test_fold_disabled_quantizes_bn_in_place(self):
        rng = np.random.default_rng(12)
        g = small_cnn(rng, with_bn=True)
        cfg = PipelineConfig(bins=128, iterations=4).disable(["bn_fold"])
        quant, report = quantize_pipeline(g, calib_for(rng, g), cfg)
        assert stage(report, "bn_fold") is None
        bn = quant.node("bn1")
        assert bn.kind == "batch_norm"
        assert bn.out_quant is not None
        quant.assert_fully_quantized()

    def test_snc_applied_through_pipeline(self):
        """A swish bottleneck gets shifted and requantized unsigned."""
        rng = np.random.default_rng(7)
        nodes = [
            Node(id="conv1", kind="conv2d", inputs=["input"],
                 weights=f32(rng, (3, 3, 2, 4), scale=0.4), bias=f32(rng, (4,), scale=0.1),
                 padding="same"),
            Node(id="act", kind="activation", inputs=["conv1"], act=Activation(kind="swish")),
            Node(id="conv2", kind="conv2d", inputs=["act"],
                 weights=f32(rng, (3, 3, 4, 3), scale=0.4), bias=f32(rng, (3,), scale=0.1),
                 padding="same"),
        ]
        g = Graph(nodes=nodes, inputs=[GraphInput("input", (6, 6, 2))], outputs=["conv2"]).validate()
        quant, report = quantize_pipeline(g, calib_for(rng, g, n=12), PipelineConfig(bins=256, iterations=6))
        shifted = stage(report, "snc")["shifted"]
        assert [s["layer"] for s in shifted] == ["act"]
        act = quant.node("act")
        assert act.act.shift > 0
        assert not act.out_quant.signed

    def test_mean_mse_not_worse_than_nc_baseline(self, trained_fixture):
        """Selected thresholds track the float trace at least as well as
        covering thresholds on every fixture tensor set."""
        calib = trained_fixture.calibration_set()
        _, default_report = quantize_pipeline(trained_fixture.graph, calib, PipelineConfig())
        nc_cfg = PipelineConfig(error_measure=ErrorMeasure.NC).disable(
            [s for s in STAGE_NAMES if s != "bn_fold"]
        )
        _, nc_report = quantize_pipeline(trained_fixture.graph, calib, nc_cfg)
        assert stage(default_report, "per_layer_mse")["mean"] <= stage(nc_report, "per_layer_mse")["mean"]


class TestReportRendering:
    def test_text_mentions_every_stage(self):
        rng = np.random.default_rng(8)
        g = small_cnn(rng)
        _, report = quantize_pipeline(g, calib_for(rng, g), PipelineConfig(bins=128, iterations=4))
        text = render_text(report)
        for token in ("bn_fold", "statistics", "outlier_removal", "activation_thresholds",
                      "weight_thresholds", "bias_correction", "per_layer_mse"):
            assert token in text

    def test_write_report_emits_files_and_figures(self, tmp_path):
        rng = np.random.default_rng(9)
        g = small_cnn(rng)
        calib = calib_for(rng, g)
        quant, report = quantize_pipeline(g, calib, PipelineConfig(bins=128, iterations=4))
        store = collect_statistics(quant, calib, 128)
        out = tmp_path / "report"
        write_report(report, out, store=store)
        assert (out / "report.json").is_file()
        assert (out / "report.txt").is_file()
        assert (out / "per_layer_mse.csv").is_file()
        figures = list((out / "figures").glob("*.png"))
        assert any(f.name == "per_layer_mse.png" for f in figures)
        assert any(f.name.startswith("threshold_") for f in figures)


@pytest.fixture()
def cli_workspace(tmp_path):
    """Small model + labelled dataset on disk for CLI runs."""
    rng = np.random.default_rng(10)
    g = small_cnn(rng)
    samples = [Tensor.from_array(x) for x in random_inputs(rng, g, 8)]
    from hptq.engine import run_float

    labels = np.array([int(np.argmax(run_float(g, s).outputs[0].array)) for s in samples])
    model = tmp_path / "model.json"
    data = tmp_path / "data.json"
    save_model(g, model)
    save_dataset(CalibrationSet(samples=samples, labels=labels), data)
    return tmp_path, model, data


FAST = ["--bins", "128", "--iterations", "4"]


class TestCli:
    def test_quantize_defaults(self, cli_workspace, capsys):
        tmp, model, data = cli_workspace
        out = tmp / "quant.json"
        code = main(["quantize", "--model", str(model), "--data", str(data), "--out", str(out)] + FAST)
        assert code == 0
        assert out.is_file() and (tmp / "quant.bin").is_file()
        loaded = load_model(out)
        loaded.assert_fully_quantized()
        assert "quantized model written" in capsys.readouterr().out

    def test_quantize_with_report(self, cli_workspace):
        tmp, model, data = cli_workspace
        out = tmp / "quant.json"
        report = tmp / "report"
        code = main(["quantize", "--model", str(model), "--data", str(data), "--out", str(out),
                     "--report", str(report)] + FAST)
        assert code == 0
        assert (report / "report.json").is_file()
        assert (report / "figures" / "per_layer_mse.png").is_file()

    def test_quantize_deterministic(self, cli_workspace):
        tmp, model, data = cli_workspace
        (tmp / "r1").mkdir()
        (tmp / "r2").mkdir()
        for d in ("r1", "r2"):
            assert main(["quantize", "--model", str(model), "--data", str(data),
                         "--out", str(tmp / d / "q.json")] + FAST) == 0
        assert (tmp / "r1" / "q.json").read_bytes() == (tmp / "r2" / "q.json").read_bytes()
        assert (tmp / "r1" / "q.bin").read_bytes() == (tmp / "r2" / "q.bin").read_bytes()

    def test_disable_stage(self, cli_workspace):
        tmp, model, data = cli_workspace
        out = tmp / "q.json"
        report = tmp / "rep"
        code = main(["quantize", "--model", str(model), "--data", str(data), "--out", str(out),
                     "--disable", "snc,equalization", "--report", str(report)] + FAST)
        assert code == 0
        stages = [s["stage"] for s in json.loads((report / "report.json").read_text())["stages"]]
        assert "snc" not in stages
        assert "equalization" not in stages

    def test_unknown_stage_is_usage_error(self, cli_workspace):
        tmp, model, data = cli_workspace
        with pytest.raises(SystemExit) as e:
            main(["quantize", "--model", str(model), "--data", str(data),
                  "--out", str(tmp / "q.json"), "--disable", "bogus"])
        assert e.value.code == 2

    def test_unknown_flag_is_usage_error(self):
        with pytest.raises(SystemExit) as e:
            main(["quantize", "--frobnicate"])
        assert e.value.code == 2

    def test_nc_ablation_flags(self, cli_workspace):
        tmp, model, data = cli_workspace
        out = tmp / "q.json"
        code = main(["quantize", "--model", str(model), "--data", str(data), "--out", str(out),
                     "--error", "nc", "--disable", "equalization,bias_correction,outlier_removal"] + FAST)
        assert code == 0

    def test_missing_model_fails_cleanly(self, cli_workspace, capsys):
        tmp, _, data = cli_workspace
        code = main(["quantize", "--model", str(tmp / "ghost.json"), "--data", str(data),
                     "--out", str(tmp / "q.json")])
        assert code == 1
        assert "error:" in capsys.readouterr().err

    def test_eval(self, cli_workspace, capsys):
        tmp, model, data = cli_workspace
        out = tmp / "q.json"
        main(["quantize", "--model", str(model), "--data", str(data), "--out", str(out)] + FAST)
        code = main(["eval", "--float", str(model), "--quant", str(out), "--data", str(data)])
        assert code == 0
        text = capsys.readouterr().out
        assert "float score" in text and "quantized score" in text

    def test_eval_without_labels_fails(self, cli_workspace, capsys):
        tmp, model, data = cli_workspace
        rng = np.random.default_rng(11)
        bare = tmp / "bare.json"
        save_dataset(CalibrationSet(samples=[Tensor.from_array(rng.normal(size=(6, 6, 2)))]), bare)
        out = tmp / "q.json"
        main(["quantize", "--model", str(model), "--data", str(data), "--out", str(out)] + FAST)
        code = main(["eval", "--float", str(model), "--quant", str(out), "--data", str(bare)])
        assert code == 1
        assert "labels" in capsys.readouterr().err

    def test_stats(self, cli_workspace):
        tmp, model, data = cli_workspace
        out = tmp / "stats.csv"
        code = main(["stats", "--model", str(model), "--data", str(data), "--out", str(out), "--bins", "64"])
        assert code == 0
        lines = out.read_text().strip().split("\n")
        assert lines[0] == "tensor,channel,min,max,mean"
        assert len(lines) > 1

    def test_ablate(self, cli_workspace, capsys):
        tmp, model, data = cli_workspace
        out = tmp / "ablation"
        code = main(["ablate", "--model", str(model), "--data", str(data), "--out", str(out)] + FAST)
        assert code == 0
        csv_text = (out / "ablation.csv").read_text()
        assert "baseline_nc" in csv_text
        assert "+bias_correction" in csv_text
        assert (out / "figures" / "ablation.png").is_file()
        assert "configuration" in capsys.readouterr().out
