import numpy as np
import pytest
import torch

from stad.assignment import assign_fcos_targets
from stad.model import (
    ActionDetector,
    ActionHead,
    DensePredictions,
    ModelConfig,
    decode_batch,
    decode_proposals,
    load_checkpoint,
    save_checkpoint,
)


@pytest.fixture(scope="module")
def model():
    torch.manual_seed(0)
    return ActionDetector().eval()


def test_shapes(model):
    clips = torch.rand(2, 1, 8, 64, 64)
    feats, preds = model(clips)
    assert feats.c3.shape == (2, 32, 16, 16)
    assert feats.c4.shape == (2, 64, 8, 8)
    assert feats.c5.shape == (2, 128, 8, 4, 4)
    assert preds.num_locations == 16 * 16 + 8 * 8 + 4 * 4 == 336
    assert preds.actorness.shape == (2, 336)
    assert preds.regression.shape == (2, 336, 4)
    assert torch.all(preds.regression > 0)
    sizes = [s.stop - s.start for s in preds.level_slices]
    assert sizes == [256, 64, 16]


def test_rejects_bad_shape(model):
    with pytest.raises(ValueError):
        model(torch.rand(1, 1, 4, 64, 64))


def test_prior_initialisation(model):
    _, preds = model(torch.rand(1, 1, 8, 64, 64))
    p = torch.sigmoid(preds.actorness)
    assert torch.allclose(p.mean(), torch.tensor(0.01), atol=0.005)


def _preds(act, ctr, reg, locs):
    return DensePredictions(
        torch.tensor([act], dtype=torch.float32),
        torch.tensor([reg], dtype=torch.float32),
        torch.tensor([ctr], dtype=torch.float32),
        torch.tensor(locs, dtype=torch.float32),
    )


def test_decode_threshold_nms_and_cap():
    locs = [[10, 10], [11, 10], [40, 40], [50, 50]]
    reg = [[5, 5, 5, 5]] * 4
    big = 10.0
    preds = _preds([big, big - 1, big - 2, -big], [big] * 4, reg, locs)
    (b,), (s,) = decode_batch(preds, 0.3, 10, True, 0.3)
    assert len(b) == 2  # second box suppressed, fourth below threshold
    assert b[0].tolist() == [5, 5, 15, 15] and b[1].tolist() == [35, 35, 45, 45]
    (b,), _ = decode_batch(preds, 0.3, 10, False)
    assert len(b) == 3
    (b,), _ = decode_batch(preds, 0.3, 1, False)
    assert len(b) == 1


def test_decode_score_is_product():
    preds = _preds([0.0], [0.0], [[1, 1, 1, 1]], [[5, 5]])
    dets = decode_proposals(preds, 0.2, 10, False)
    assert dets[0].actorness == pytest.approx(0.25)
    assert decode_proposals(preds, 0.3, 10, False) == []
    with pytest.raises(ValueError):
        decode_proposals(preds, 1.5, 10, False)


def test_decode_clips_to_image():
    preds = _preds([5.0], [5.0], [[20, 20, 20, 20]], [[5, 60]])
    (b,), _ = decode_batch(preds, 0.1, 10, False)
    assert b[0].tolist() == [0, 40, 25, 64]


def test_action_head_constant_feature():
    # with spatially and temporally constant features every box sees the same vector
    head = ActionHead(4, 3, 7, 16)
    c5 = torch.ones(1, 4, 3, 4, 4) * torch.arange(4.0).view(1, 4, 1, 1, 1)
    full = head.roi_features(c5, [torch.tensor([[0.0, 0, 64, 64], [8, 8, 20, 30]])])
    assert torch.allclose(full[0], torch.arange(4.0), atol=1e-6)
    assert torch.allclose(full[0], full[1], atol=1e-6)


def test_action_head_empty():
    head = ActionHead(4, 3, 7, 16)
    out = head(torch.rand(2, 4, 3, 4, 4), [torch.zeros(0, 4), torch.zeros(0, 4)])
    assert out.shape == (0, 3)


def test_deterministic_forward(model):
    x = torch.rand(2, 1, 8, 64, 64)
    a = model(x)[1].regression
    b = model(x)[1].regression
    assert torch.equal(a, b)


def test_gradients_reach_every_parameter():
    torch.manual_seed(1)
    m = ActionDetector()
    feats, preds = m(torch.rand(2, 1, 8, 64, 64))
    logits = m.action_head(feats.c5, [torch.tensor([[4.0, 4, 40, 40]]), torch.tensor([[10.0, 10, 30, 50]])])
    loss = preds.actorness.sum() + preds.regression.sum() + preds.centerness.sum() + logits.sum()
    loss.backward()
    for name, p in m.named_parameters():
        assert p.grad is not None and torch.any(p.grad != 0), name


def test_perfect_prediction_loss_is_small():
    from stad.losses import centerness_loss, focal_loss, giou_loss

    m = ActionDetector()
    t = assign_fcos_targets([[8, 8, 30, 40], [34, 20, 60, 60]], m.pyramid, (64, 64))
    big = 30.0
    act = torch.where(torch.as_tensor(t.actorness) > 0, big, -big).double()
    focal = focal_loss(act, torch.as_tensor(t.actorness, dtype=torch.float64)).sum() / max(1, t.num_positive)
    pos = np.nonzero(t.actorness)[0]
    locs = t.locations[pos]
    reg = t.regression[pos]
    boxes = np.concatenate([locs - reg[:, :2], locs + reg[:, 2:]], axis=1)
    g = giou_loss(torch.as_tensor(boxes), torch.as_tensor(t.decode()[pos])).mean()
    c = torch.as_tensor(t.centerness[pos])
    logit = torch.log(c) - torch.log1p(-c.clamp(max=1 - 1e-12))
    ctr = centerness_loss(logit, c) - centerness_loss(torch.logit(c.clamp(1e-12, 1 - 1e-12)), c)
    assert float(focal + g + ctr.abs().mean()) < 1e-3


def test_checkpoint_round_trip(tmp_path):
    torch.manual_seed(2)
    a = ActionDetector()
    path = tmp_path / "m.npz"
    save_checkpoint(path, a, {"config": a.cfg.digest(), "iteration": 3})
    b = ActionDetector()
    manifest, _ = load_checkpoint(path, b)
    assert manifest["iteration"] == 3
    for (k, v), (_, w) in zip(a.state_dict().items(), b.state_dict().items()):
        assert torch.equal(v, w), k
    assert list(tmp_path.iterdir()) == [path]


def test_config_digest_changes():
    assert ModelConfig().digest() != ModelConfig(num_classes=5).digest()


@pytest.mark.parametrize("which", ["localization", "action"])
def test_each_head_alone_reaches_backbone(which):
    torch.manual_seed(3)
    m = ActionDetector()
    feats, preds = m(torch.rand(1, 1, 8, 64, 64))
    if which == "localization":
        loss = preds.actorness.sum() + preds.regression.sum()
    else:
        loss = m.action_head(feats.c5, [torch.tensor([[4.0, 4, 40, 40]])]).sum()
    loss.backward()
    # the last stage only feeds the action head
    shared = m.backbone.stages[:3] if which == "localization" else m.backbone.stages
    for p in shared.parameters():
        assert p.grad is not None and torch.any(p.grad != 0)
