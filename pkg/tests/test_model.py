import numpy as np
import pytest

from priordetr import gmm, synth
from priordetr.detection import total_loss
from priordetr.model import Detector, ModelConfig

SMALL = dict(enc_layers=2, dec_layers=2, num_queries=6, d_model=32, heads=2)


@pytest.fixture(scope="module")
def batch():
    s = synth.generate(synth.SynthConfig(seed=0), 2)
    return np.stack([x.image for x in s]), [{"boxes": x.boxes, "labels": x.labels} for x in s]


@pytest.fixture(scope="module")
def prior():
    return gmm.GmmPrior2D(np.array([1.0]), np.array([[1.0, np.log(16.0)]]),
                          np.array([np.eye(2) * 0.01]), w_ref=16.0)


def test_output_shapes(batch, prior):
    m = Detector(ModelConfig(**SMALL), prior)
    logits, boxes = m(batch[0])
    assert len(logits) == 2 and logits[-1].shape == (2, 6, 2) and boxes[-1].shape == (2, 6, 4)
    # 64 px input -> 8x8, 4x4, 2x2 levels
    assert m.transformer.last_encoder_outputs[0].shape == (2, 84, 32)


def test_every_parameter_gets_gradient(batch, prior):
    m = Detector(ModelConfig(**SMALL), prior)
    logits, boxes = m(batch[0])
    loss = None
    for l, b in zip(logits, boxes):
        t, _, _ = total_loss(l, b, batch[1])
        loss = t if loss is None else loss + t
    loss.backward()
    missing = [n for n, p in m.named_parameters() if p.grad is None]
    assert missing == []
    # exactly-zero gradients at init only behind zero-initialized layers: the
    # DFI cross terms and the hidden layers of box heads whose output layer is 0
    zero = [n for n, p in m.named_parameters() if not np.any(p.grad)]
    assert all("dfi.gammas" in n or ("box_heads" in n and "layers.2" not in n) for n in zero)
    assert np.any(m.transformer.box_heads[0].layers[-1].weight.grad)


def test_ablation_flags_remove_modules(prior):
    m = Detector(ModelConfig(**SMALL, use_sdfpr=False, use_msffm=False, strategy="original"), prior)
    assert m.msffm is None and all(s.sdfpr is None for s in m.stages)
    assert m.transformer.dfi is None
    full = Detector(ModelConfig(**SMALL), prior)
    assert m.num_parameters() < full.num_parameters()


def test_no_prior_disables_modulation(batch):
    m = Detector(ModelConfig(**SMALL), prior=None)
    m(batch[0])
    assert all(s.sdfpr.dcn.last_offsets is None for s in m.stages)


def test_same_seed_same_output(batch, prior):
    a = Detector(ModelConfig(**SMALL), prior, seed=3).eval()
    b = Detector(ModelConfig(**SMALL), prior, seed=3).eval()
    assert np.array_equal(a(batch[0])[1][-1].data, b(batch[0])[1][-1].data)


def test_predict_format(batch, prior):
    m = Detector(ModelConfig(**SMALL), prior)
    dets = m.predict(batch[0], top_k=5)
    assert len(dets) == 2
    d = dets[0]
    assert d["boxes"].shape == (5, 4) and d["scores"].shape == (5,)
    assert (np.diff(d["scores"]) <= 0).all()
    assert set(d["labels"].tolist()) <= {0, 1}
    assert m.training  # mode restored


def test_config_validation():
    with pytest.raises(ValueError, match="3 stage"):
        ModelConfig(widths=(8, 16))


def test_two_stage_seeds_references_from_proposals(batch, prior):
    m = Detector(ModelConfig(**SMALL, two_stage=True), prior)
    logits, boxes = m(batch[0])
    cls, props = m.transformer.last_proposals
    assert cls.shape == (2, 84, 2) and props.shape == (2, 84, 4)
    # zero-initialized proposal head: proposals are the per-token anchors
    anchors = m._anchors([(8, 8), (4, 4), (2, 2)])
    np.testing.assert_allclose(props.data[0], anchors, atol=1e-6)
    top = np.argsort(-cls.data.max(-1), axis=1, kind="stable")[:, :6]
    np.testing.assert_allclose(boxes[0].data, np.take_along_axis(props.data, top[..., None], 1),
                               atol=1e-6)


def test_two_stage_more_queries_than_tokens(batch, prior):
    m = Detector(ModelConfig(**{**SMALL, "num_queries": 90}, two_stage=True), prior)
    logits, boxes = m(batch[0])
    assert boxes[-1].shape == (2, 90, 4)
    loss, _, _ = total_loss(logits[0], boxes[0], batch[1])  # refs detach after layer 1
    loss.backward()
    assert np.any(m.transformer.anchor_logits.grad[84:])
