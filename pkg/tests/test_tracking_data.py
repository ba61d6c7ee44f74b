import json

import numpy as np
import pytest

from bbox_head import BBox, box_iou
from tensor_core import AnnotationParseError, ContractViolation
from tracking_data import (
    PixelBox,
    SceneConfig,
    SyntheticScene,
    ToyEncoder,
    dataset_checksum,
    encode_frames,
    encode_sequence,
    generate_sequence,
    load_annotation_file,
    load_dataset,
    normalize_boxes,
    parse_got10k_annotations,
    parse_otb_annotations,
    read_manifest,
    sequence_seed,
    serialize_got10k_annotations,
    template_gain,
    write_dataset,
)

SMALL = SceneConfig(image_size=32, frames=4, n_train=3, n_eval=2)


# ----------------------------- parsers -----------------------------

def test_got10k_line_to_normalized_box():
    boxes = parse_got10k_annotations("10,20,30,40\n")
    assert boxes == [PixelBox(10.0, 20.0, 30.0, 40.0)]
    (box,) = normalize_boxes(boxes, 100, 100)
    assert (box.cx, box.cy, box.w, box.h) == pytest.approx((0.25, 0.4, 0.3, 0.4))


def test_empty_annotation_text():
    assert parse_got10k_annotations("") == []
    assert parse_otb_annotations("\n  \n") == []


def test_non_numeric_field_reports_line():
    with pytest.raises(AnnotationParseError, match="line 1") as exc:
        parse_got10k_annotations("10,20,thirty,40")
    assert exc.value.line_no == 1


def test_parse_errors_name_the_line():
    with pytest.raises(AnnotationParseError, match="line 2"):
        parse_got10k_annotations("1,2,3,4\n1,2,3\n")
    with pytest.raises(AnnotationParseError, match="line 3"):
        parse_got10k_annotations("1,2,3,4\n1,2,3,4\n1,2,0,4\n")
    with pytest.raises(AnnotationParseError, match="line 1"):
        parse_got10k_annotations("1,2,nan,4")


def test_trailing_whitespace_is_tolerated():
    assert len(parse_got10k_annotations("1,2,3,4  \n5, 6, 7, 8\n\n\n")) == 2


def test_otb_separators():
    boxes = parse_otb_annotations("1\t2\t3\t4\n5,6,7,8\n9 10 11 12\n")
    assert boxes == [PixelBox(1, 2, 3, 4), PixelBox(5, 6, 7, 8), PixelBox(9, 10, 11, 12)]


def test_serialize_round_trip():
    boxes = parse_otb_annotations("1\t2.5\t3\t4\n0.1, 0.2, 0.3, 0.4\n")
    text = serialize_got10k_annotations(boxes)
    assert text == "1.0,2.5,3.0,4.0\n0.1,0.2,0.3,0.4\n"
    assert parse_got10k_annotations(text) == boxes


def test_load_annotation_file(tmp_path):
    path = tmp_path / "groundtruth_rect.txt"
    path.write_text("1\t2\t3\t4\n")
    assert load_annotation_file(path, "otb") == [PixelBox(1, 2, 3, 4)]
    with pytest.raises(ContractViolation, match="unknown annotation format"):
        load_annotation_file(path, "vot")


# ----------------------------- scenes -----------------------------

def test_zero_velocity_keeps_box_constant():
    scene = SyntheticScene(seed=3, image_size=32, frames=5, velocity=(0.0, 0.0), distractor_prob=0.0)
    rec = generate_sequence(scene)
    assert len(set(rec.pixel_boxes)) == 1
    assert len(rec) == 5


def test_same_seed_same_pixels():
    a = generate_sequence(SyntheticScene(seed=11, image_size=32, frames=3))
    b = generate_sequence(SyntheticScene(seed=11, image_size=32, frames=3))
    np.testing.assert_array_equal(a.frames, b.frames)
    assert a.boxes == b.boxes
    c = generate_sequence(SyntheticScene(seed=12, image_size=32, frames=3))
    assert not np.array_equal(a.frames, c.frames)


def test_bounce_reverses_velocity_and_stays_inside():
    side, w = 32, 8
    scene = SyntheticScene(seed=0, image_size=side, frames=12, size=(w, w), init_xy=(side - w, 10.0),
                           velocity=(2.5, 0.0), distractor_prob=0.0)
    rec = generate_sequence(scene)
    assert rec.velocities[0][0] == 2.5
    assert rec.velocities[1][0] == -2.5
    for pb in rec.pixel_boxes:
        assert 0 <= pb.x and pb.x + pb.w <= side
        assert 0 <= pb.y and pb.y + pb.h <= side
    for box in rec.boxes:
        x0, y0, x1, y1 = box.to_corners()
        assert 0.0 <= x0 and x1 <= 1.0 and 0.0 <= y0 and y1 <= 1.0


def test_random_scenes_keep_pixels_and_boxes_in_range():
    for seed in range(10):
        scene = SyntheticScene(seed=seed, image_size=48, frames=20, distractor_prob=1.0, max_speed=4.0)
        rec = generate_sequence(scene)
        assert rec.frames.shape == (20, 3, 48, 48)
        assert all(isinstance(b, BBox) for b in rec.boxes)
        assert rec.frames.min() >= 0.0 and rec.frames.max() <= 1.0


def test_infeasible_scene():
    with pytest.raises(ContractViolation, match="infeasible"):
        generate_sequence(SyntheticScene(seed=0, image_size=16, size=(20, 4)))


def test_scene_config_validation():
    with pytest.raises(ValueError):
        SceneConfig(image_size=30)
    with pytest.raises(ValueError):
        SceneConfig(min_size=0.5, max_size=0.2)


# ----------------------------- encoder -----------------------------

@pytest.mark.parametrize("batch", [1, 8])
def test_encoder_output_dims(batch, rng):
    enc = ToyEncoder(seed=0, embed_dim=32, image_size=96)
    out = enc(rng.uniform(size=(batch, 3, 96, 96)))
    assert out.shape == (batch, 32, 12, 12)


def test_encoder_is_deterministic(rng):
    frame = rng.uniform(size=(1, 3, 32, 32))
    a = ToyEncoder(seed=5, embed_dim=8, image_size=32)
    b = ToyEncoder(seed=5, embed_dim=8, image_size=32)
    np.testing.assert_array_equal(a(np.concatenate([frame, frame])), np.concatenate([b(frame), b(frame)]))


def test_encoder_rejects_wrong_frames(rng):
    with pytest.raises(ContractViolation, match="encoder expects"):
        ToyEncoder(image_size=32, embed_dim=4)(rng.uniform(size=(1, 3, 40, 40)))


def test_encoder_response_follows_motion():
    scene = SyntheticScene(seed=1, image_size=96, frames=11, size=(20, 20), init_xy=(10.0, 38.0),
                           velocity=(3.0, 0.0), distractor_prob=0.0, noise=0.0)
    rec = generate_sequence(scene)
    feats = encode_frames(rec.frames[[0, 10]], ToyEncoder(seed=0, embed_dim=32, image_size=96))
    response = feats.mean(axis=1)
    cols = np.arange(response.shape[-1])
    centres = [(r.sum(axis=0) * cols).sum() / r.sum() for r in response]
    assert centres[1] > centres[0]


def test_template_gain_normalized(rng):
    feats = rng.uniform(0.1, 1.0, size=(6, 4, 4))
    gain = template_gain(feats, BBox(0.5, 0.5, 0.5, 0.5))
    assert gain.shape == (6,)
    assert gain.mean() == pytest.approx(1.0, rel=1e-5)
    np.testing.assert_allclose(gain, feats[:, 1:3, 1:3].mean(axis=(1, 2)) / (feats[:, 1:3, 1:3].mean() + 1e-6))


def test_encode_sequence_with_and_without_template():
    rec = generate_sequence(SyntheticScene(seed=2, image_size=32, frames=3))
    enc = ToyEncoder(seed=0, embed_dim=4, image_size=32)
    plain = encode_sequence(rec, enc, use_template=False)
    gated = encode_sequence(rec, enc, use_template=True)
    assert plain.shape == gated.shape == (3, 4, 4, 4)
    gain = template_gain(enc(rec.frames[:1])[0], rec.boxes[0])
    np.testing.assert_allclose(gated, plain * gain[None, :, None, None])


# ----------------------------- datasets on disk -----------------------------

def test_write_and_load_dataset(tmp_path):
    manifest = write_dataset(tmp_path / "ds", SMALL, seed=4)
    assert manifest["splits"] == {"train": 3, "eval": 2}
    train = load_dataset(tmp_path / "ds", "train")
    assert [r.name for r in train] == ["seq_0000", "seq_0001", "seq_0002"]
    fresh = generate_sequence(SyntheticScene.from_config(SMALL, sequence_seed(4, "train", 1)), "seq_0001")
    np.testing.assert_array_equal(train[1].frames, fresh.frames)
    for a, b in zip(train[1].boxes, fresh.boxes):
        assert box_iou(a, b) == 1.0
    assert len(load_dataset(tmp_path / "ds", "eval")) == 2
    assert json.loads((tmp_path / "ds" / "dataset.json").read_text())["seed"] == 4


def test_same_seed_same_checksum(tmp_path, monkeypatch):
    write_dataset(tmp_path / "a", SMALL, seed=9)
    monkeypatch.setenv("BOXHEAD_THREADS", "3")
    write_dataset(tmp_path / "b", SMALL, seed=9)
    write_dataset(tmp_path / "c", SMALL, seed=10)
    assert dataset_checksum(tmp_path / "a") == dataset_checksum(tmp_path / "b")
    assert dataset_checksum(tmp_path / "a") != dataset_checksum(tmp_path / "c")


def test_empty_dataset_is_rejected(tmp_path):
    with pytest.raises(ContractViolation, match="empty dataset"):
        write_dataset(tmp_path, SMALL.model_copy(update={"n_eval": 0}))


def test_missing_dataset(tmp_path):
    with pytest.raises(FileNotFoundError):
        read_manifest(tmp_path)
    with pytest.raises(ContractViolation, match="unknown split"):
        load_dataset(tmp_path, "test")


def test_background_is_empty_without_noise_or_distractors():
    rec = generate_sequence(SyntheticScene(seed=6, image_size=32, frames=3, distractor_prob=0.0, noise=0.0))
    for frame, pb in zip(rec.frames, rec.pixel_boxes):
        x, y, w, h = (int(v) for v in pb)
        inside = frame[:, y:y + h, x:x + w]
        assert inside.min() >= 0.3
        assert frame.sum() == pytest.approx(inside.sum())
