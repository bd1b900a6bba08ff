import json
from dataclasses import replace

import numpy as np
import pytest

from groupprompt import checkpoint as ckpt_io
from groupprompt.config import OptimConfig, RunConfig, load_config
from groupprompt.data import NucleusInstance, generate_dataset
from groupprompt.errors import CheckpointError, DivergenceError, ParameterError
from groupprompt.model import ModelConfig, ModelOutput, NucleusDetector, decode_predictions
from groupprompt.tensor import Tensor
from groupprompt import train as train_mod
from groupprompt.train import (build_model, checkpoint_meta, dihedral, learning_rate,
                               model_from_checkpoint, predict_scenes, train)

from conftest import TINY


@pytest.fixture
def run():
    return RunConfig.from_dict(json.loads(json.dumps(TINY)))


@pytest.fixture
def scenes(run):
    return generate_dataset(run.scene, 6, seed=3)


def pretuned(run, scenes, tmp_path):
    model = build_model(run, "pretune")
    result = train(model, scenes, run, "pretune")
    ckpt_io.save(tmp_path / "pre", model, checkpoint_meta(run, "pretune", result))
    return ckpt_io.load(tmp_path / "pre")


class TestConfig:
    def test_defaults_round_trip(self):
        run = RunConfig()
        assert RunConfig.from_dict(json.loads(run.to_json())) == run
        assert load_config(None) == run

    def test_phase_models(self, run):
        assert run.model_for("pretune").head == "fc" and not run.model_for("pretune").use_prompts
        assert run.model_for("prompt-tune").head == "gtc"
        with pytest.raises(ParameterError):
            run.model_for("finetune")

    def test_unknown_keys(self):
        with pytest.raises(ParameterError, match="unknown"):
            RunConfig.from_dict({"modle": {}})
        with pytest.raises(ParameterError):
            RunConfig.from_dict({"pretune": {"lr": 1e-3, "bogus": 1}})
        with pytest.raises(ParameterError, match="unknown model"):
            ModelConfig.from_dict({"heads": "fc"})

    def test_invalid_values(self):
        with pytest.raises(ParameterError):
            OptimConfig(lr=0.0)
        with pytest.raises(ParameterError):
            ModelConfig(head="svm")
        with pytest.raises(ParameterError):
            ModelConfig(head="gtc", num_groups=0)
        with pytest.raises(ParameterError):
            RunConfig(eval_radius=-1.0)

    def test_bad_json_file(self, tmp_path):
        (tmp_path / "c.json").write_text("{not json")
        with pytest.raises(ParameterError, match="invalid JSON"):
            load_config(tmp_path / "c.json")

    def test_cosine_schedule(self):
        assert learning_rate(1.0, "constant", 5, 10) == 1.0
        assert learning_rate(1.0, "cosine", 0, 10) == pytest.approx(1.0)
        assert learning_rate(1.0, "cosine", 5, 10) == pytest.approx(0.5)


class TestModel:
    def test_output_shapes(self, run, nprng):
        model = NucleusDetector(run.model)
        out = model(nprng.random((2, 32, 32, 3)), train=False)
        assert len(out.sides) == 2
        assert out.scores[-1].shape == (2, 12, 4) and out.sides[-1].points.shape == (2, 12, 2)

    def test_prompts_are_groups(self, run):
        model = NucleusDetector(run.model)
        assert model.heads[0].groups is model.prompts.prompts
        names = [n for n, _ in model.named_parameters()]
        assert "prompts.prompts" in names and not any(n.endswith(".groups") for n in names)

    def test_unshared_groups(self, run):
        model = NucleusDetector(replace(run.model, share_prompts=False))
        assert model.heads[0].groups is not model.prompts.prompts

    def test_per_layer_heads(self, run):
        model = NucleusDetector(replace(run.model, shared_head=False))
        assert len(model.heads) == 2

    def test_eval_is_deterministic(self, run, nprng):
        model = NucleusDetector(run.model, seed=4)
        img = nprng.random((1, 32, 32, 3))
        a = model(img, train=False).scores[-1].value
        assert a.tobytes() == model(img, train=False).scores[-1].value.tobytes()

    def test_decode(self):
        cfg = ModelConfig(height=32, width=32, num_classes=2)
        points = Tensor([[[0.5, 0.25], [1.0, 1.0], [0.1, 0.1]]])
        scores = Tensor([[[5.0, 0.0, 0.0], [0.0, 5.0, 0.0], [0.0, 0.0, 5.0]]])
        preds = decode_predictions(ModelOutput([_Side(points)], [scores], None), cfg)[0]
        assert [(p.x, p.y, p.class_id) for p in preds] == [(16.0, 8.0, 1), (np.nextafter(32, 0),) * 2 + (2,)]
        assert preds[0].score == pytest.approx(np.exp(5) / (np.exp(5) + 2))


class _Side:
    def __init__(self, points):
        self.points = points


class TestDihedral:
    @pytest.mark.parametrize("code", range(8))
    def test_pixel_follows_image(self, code, nprng):
        img = np.zeros((8, 8, 3))
        img[2, 5] = 1.0            # pixel centre (5.5, 2.5)
        out, (n,) = dihedral(img, [NucleusInstance(5.5, 2.5, 1)], code)
        r, c = np.argwhere(out[..., 0] == 1.0)[0]
        assert (n.x, n.y) == (c + 0.5, r + 0.5)

    def test_identity(self, nprng):
        img = nprng.random((4, 4, 3))
        out, pts = dihedral(img, [NucleusInstance(1.0, 2.0, 2)], 0)
        assert out.tobytes() == img.tobytes() and pts == [NucleusInstance(1.0, 2.0, 2)]

    def test_border_stays_inside(self):
        _, (n,) = dihedral(np.zeros((4, 4, 3)), [NucleusInstance(0.0, 0.0, 1)], 3)
        assert n.x < 4 and n.y < 4


class TestTraining:
    def test_pretune_then_prompt_tune_freezes_backbone(self, run, scenes, tmp_path):
        init = pretuned(run, scenes, tmp_path)
        model = build_model(run, "prompt-tune", init)
        before = {n: p.value.copy() for n, p in model.named_parameters() if n.startswith("backbone.")}
        result = train(model, scenes, run, "prompt-tune")
        ckpt_io.save(tmp_path / "pt", model, checkpoint_meta(run, "prompt-tune", result))
        for n, p in model.named_parameters():
            if n.startswith("backbone."):
                assert p.value.tobytes() == before[n].tobytes() and p.frozen
        pre_blob, pt_blob = ckpt_io.read_blob(tmp_path / "pre"), ckpt_io.read_blob(tmp_path / "pt")
        pt = ckpt_io.load(tmp_path / "pt")
        assert pt.block_bytes("backbone.", pt_blob) == init.block_bytes("backbone.", pre_blob)
        assert 0 < result.tuned_params < result.total_params
        assert result.ratio == result.tuned_params / result.total_params

    def test_training_changes_weights_and_logs(self, run, scenes):
        model = build_model(run, "pretune")
        start = model.detector.parameters()[0].value.copy()
        result = train(model, scenes, run, "pretune")
        assert not np.array_equal(start, model.detector.parameters()[0].value)
        assert result.log[-1]["step"] == 4 and all(np.isfinite(r["loss"]) for r in result.log)
        assert [r["epoch"] for r in result.log] == [0, 1]

    def test_seeded_runs_bitwise(self, run, scenes):
        a = build_model(run, "pretune")
        b = build_model(run, "pretune")
        train(a, scenes, run, "pretune")
        train(b, scenes, run, "pretune")
        for (_, pa), (_, pb) in zip(a.named_parameters(), b.named_parameters()):
            assert pa.value.tobytes() == pb.value.tobytes()

    def test_prompt_tune_needs_init(self, run):
        with pytest.raises(CheckpointError):
            build_model(run, "prompt-tune", None)

    def test_divergence(self, run, scenes, monkeypatch):
        monkeypatch.setattr(train_mod, "total_loss", lambda *a, **k: (Tensor(np.nan), None))
        with pytest.raises(DivergenceError, match="step 0"):
            train(build_model(run, "pretune"), scenes, run, "pretune")

    def test_zero_steps(self, run, scenes):
        run = replace(run, pretune=replace(run.pretune, steps=0))
        assert train(build_model(run, "pretune"), scenes, run, "pretune").log == []


class TestCheckpoint:
    def test_round_trip_bitwise(self, run, scenes, tmp_path):
        model = build_model(run, "pretune")
        model.freeze_backbone()
        ckpt_io.save(tmp_path / "ck", model, {"model": model.cfg.to_dict()})
        back = model_from_checkpoint(ckpt_io.load(tmp_path / "ck"))
        for (na, pa), (nb, pb) in zip(model.named_parameters(), back.named_parameters()):
            assert na == nb and pa.value.tobytes() == pb.value.tobytes() and pa.frozen == pb.frozen
        a = predict_scenes(model, scenes)
        assert a == predict_scenes(back, scenes)

    def test_backbone_first(self, run, tmp_path):
        model = NucleusDetector(run.model)
        ckpt_io.save(tmp_path / "ck", model, {})
        recs = ckpt_io.load(tmp_path / "ck").records
        n = sum(r.name.startswith("backbone.") for r in recs)
        assert all(r.name.startswith("backbone.") for r in recs[:n])
        assert recs[0].offset == 0 and recs[-1].offset + recs[-1].count == sum(r.count for r in recs)

    def test_missing(self, tmp_path):
        with pytest.raises(CheckpointError, match="no checkpoint"):
            ckpt_io.load(tmp_path / "nope")

    def test_corrupt_index(self, run, tmp_path):
        ckpt_io.save(tmp_path / "ck", NucleusDetector(run.model), {})
        (tmp_path / "ck" / "index.json").write_text("{")
        with pytest.raises(CheckpointError, match="invalid JSON"):
            ckpt_io.load(tmp_path / "ck")

    def test_truncated_blob(self, run, tmp_path):
        ckpt_io.save(tmp_path / "ck", NucleusDetector(run.model), {})
        blob = tmp_path / "ck" / "params.bin"
        blob.write_bytes(blob.read_bytes()[:-8])
        with pytest.raises(CheckpointError, match="inconsistent"):
            ckpt_io.load(tmp_path / "ck")

    def test_shape_mismatch(self, run, tmp_path):
        ckpt_io.save(tmp_path / "ck", NucleusDetector(run.model), {})
        other = NucleusDetector(replace(run.model, num_groups=4))
        with pytest.raises(CheckpointError, match="shape"):
            ckpt_io.load_into(other, ckpt_io.load(tmp_path / "ck"))

    def test_missing_model_config(self, run, tmp_path):
        ckpt_io.save(tmp_path / "ck", NucleusDetector(run.model), {})
        with pytest.raises(CheckpointError, match="model config"):
            model_from_checkpoint(ckpt_io.load(tmp_path / "ck"))
