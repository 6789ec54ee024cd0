import logging

import pytest
import torch

from prism import trainer as Tr
from prism.model import ModelConfig, checkpoint_hash, read_checkpoint

SMALL = ModelConfig(model_dim=16, embedding_dim=8, heads=2)


def _cfg(mode="pretrain", **kw):
    kw.setdefault("steps", 3)
    kw.setdefault("batch_size", 2)
    return Tr.TrainConfig(mode=mode, model=SMALL, data=Tr.DataConfig(num_speakers=6, utterances_per_speaker=3), **kw)


class FixedBatch:
    """Always serves the step-0 batch of the wrapped source."""

    def __init__(self, inner):
        self.inner = inner

    def batch(self, step, n):
        return self.inner.batch(0, n)

    def feature_matrices(self, n):
        return self.inner.feature_matrices(n)


@pytest.fixture(scope="module")
def pretrained(tmp_path_factory):
    out = tmp_path_factory.mktemp("pre")
    return Tr.train(_cfg(), out)


def test_same_seed_same_checkpoint(tmp_path, pretrained):
    again = Tr.train(_cfg(), tmp_path / "b")
    assert checkpoint_hash(again.checkpoint) == checkpoint_hash(pretrained.checkpoint)
    other = Tr.train(_cfg(seed=1), tmp_path / "c")
    assert checkpoint_hash(other.checkpoint) != checkpoint_hash(pretrained.checkpoint)


def test_loss_curve_file(pretrained):
    rows = Tr.read_loss_curve(pretrained.checkpoint.parent / Tr.LOSS_CURVE_NAME)
    assert [s for s, _ in rows] == [0, 1, 2]
    assert [v for _, v in rows] == pytest.approx(pretrained.losses, abs=1e-8)
    _, meta, _ = read_checkpoint(pretrained.checkpoint)
    assert meta == {"mode": "pretrain", "seed": "0", "step": "3"}


def test_fixed_batch_loss_halves():
    cfg = _cfg(steps=200)
    result = Tr.train(cfg, None, FixedBatch(Tr.make_source(cfg)))
    assert result.losses[0] > 0
    assert result.losses[-1] <= 0.5 * result.losses[0]


@pytest.mark.parametrize("mode, head", [("finetune_ver", "heads.ams.weight"), ("finetune_diar", "heads.diar.weight")])
def test_finetune_initializes_and_logs_missing_head(tmp_path, pretrained, caplog, mode, head):
    with caplog.at_level(logging.INFO, logger="prism.trainer"):
        r = Tr.train(_cfg(mode, steps=1), tmp_path, init=pretrained.checkpoint)
    assert head in r.missing
    assert all(name.startswith("heads.") for name in r.missing)
    assert any(head in rec.getMessage() for rec in caplog.records)
    # trunk tensors were loaded, not re-initialized: the input statistics carry over
    _, _, tensors = read_checkpoint(pretrained.checkpoint)
    assert torch.equal(r.model.input_mean, tensors["input_mean"])


def test_resume_pretrain_continues_step_count(tmp_path, pretrained):
    r = Tr.train(_cfg(steps=2), tmp_path, init=pretrained.checkpoint)
    assert [s for s, _ in Tr.read_loss_curve(tmp_path / Tr.LOSS_CURVE_NAME)] == [3, 4]
    assert read_checkpoint(r.checkpoint)[1]["step"] == "5"


def test_nan_loss_names_the_step(monkeypatch):
    real = Tr.LOSS_FNS["pretrain"]
    calls = []

    def flaky(model, batch, hp):
        calls.append(1)
        loss = real(model, batch, hp)
        return loss * float("nan") if len(calls) == 2 else loss

    monkeypatch.setitem(Tr.LOSS_FNS, "pretrain", flaky)
    with pytest.raises(Tr.TrainingError, match="step 1"):
        Tr.train(_cfg())


def test_config_parsing_round_trip():
    cfg = _cfg(optimizer="sgd-momentum", learning_rate=0.01)
    assert Tr.parse_config(Tr.config_text(cfg)) == cfg


def test_config_file_with_comments(tmp_path):
    p = tmp_path / "c.txt"
    p.write_text("# toy run\nmode = finetune_diar\nsteps=7  # short\nmodel.model_dim=32\nloss.gamma_diar=0.3\n")
    cfg = Tr.load_config(p)
    assert (cfg.mode, cfg.steps, cfg.model.model_dim, cfg.loss.gamma_diar) == ("finetune_diar", 7, 32, 0.3)


@pytest.mark.parametrize(
    "text",
    ["bogus=1", "model.bogus=1", "nested.x=1", "steps=0", "batch_size=0", "mode=train", "optimizer=rmsprop",
     "steps=many", "model.use_phonetic=maybe", "loss.alpha=-1", "just words"],
)
def test_bad_config_rejected(text):
    with pytest.raises(Tr.ConfigError):
        Tr.parse_config(text)
