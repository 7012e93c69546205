import numpy as np
import pytest
from scipy import ndimage

from recapprox.core import ClassMask, DataError, seeded_rng
from recapprox.data import (
    Scene,
    SceneConfig,
    assign_availability,
    boundary,
    generate_dataset,
    generate_scene,
    load_dataset,
    make_separation_scribbles,
    make_weak_label,
    save_dataset,
)
from recapprox.geometry import connected_components, distance_transform

from oracles import flood_fill


@pytest.fixture(scope="module")
def small_dataset():
    cfg = SceneConfig(size=64, instances=(2, 4), radius=(6, 10), seed=5)
    return generate_dataset(cfg, 6)


def test_noiseless_scene_thresholds_to_ground_truth():
    cfg = SceneConfig(instances=(1, 1), classes=1, shape="ellipse", contrast=(1, 1), noise=0,
                      texture=0, shading=0, edge_softness=0)
    scene = generate_scene(cfg, seeded_rng(3))
    np.testing.assert_array_equal(scene.image.data[:, :, 0] > 0.5, scene.gt.objects())


def test_instance_count_reflects_config():
    scene = generate_scene(SceneConfig(instances=(3, 3)), seeded_rng(4))
    assert len(scene.classes) == 3
    assert sorted(np.unique(scene.instances)) == [0, 1, 2, 3]


def test_scene_is_deterministic():
    a = generate_scene(SceneConfig(), seeded_rng(9))
    b = generate_scene(SceneConfig(), seeded_rng(9))
    assert a.image.data.tobytes() == b.image.data.tobytes()
    assert np.array_equal(a.instances, b.instances)


def test_touching_pairs_share_an_edge():
    cfg = SceneConfig(touch_prob=1.0, instances=(3, 4))
    for s in range(5):
        scene = generate_scene(cfg, seeded_rng(s))
        assert scene.touching
        for a, b, _ in scene.touching:
            grown = ndimage.binary_dilation(scene.instances == a, ndimage.generate_binary_structure(2, 1))
            assert (grown & (scene.instances == b)).any()


def test_config_validation():
    with pytest.raises(ValueError):
        SceneConfig(shrink=(0.2, 1.0))
    with pytest.raises(ValueError):
        SceneConfig(instances=(0, 2))


def disk(size, center, radius):
    rr, cc = np.mgrid[:size, :size]
    return (rr - center[0]) ** 2 + (cc - center[1]) ** 2 <= radius**2


def test_weak_label_limit_is_eroded_interior():
    d = disk(32, (16, 15), 9)
    weak = make_weak_label(d, 1e-9, seeded_rng(0), perturbation=0.0)
    expected = ndimage.binary_erosion(d, ndimage.generate_binary_structure(2, 2))
    np.testing.assert_array_equal(weak, expected)


def test_weak_label_fuzz_containment_and_connectivity():
    rng = np.random.default_rng(17)
    cfg = SceneConfig()
    done = 0
    while done < 200:
        scene = generate_scene(cfg, seeded_rng(int(rng.integers(1 << 30))))
        for bits in scene.instance_masks():
            weak = make_weak_label(bits, cfg.shrink, seeded_rng(done), cfg.perturbation)
            assert weak.any()
            assert (weak <= bits).all()
            assert not (weak & boundary(bits)).any()
            assert flood_fill(weak, 8)[1] == 1
            done += 1


def test_weak_labels_of_a_scene_are_separate_instances(small_dataset):
    for item in small_dataset.items:
        weak = item.labels.get(2)
        n_inst = len(np.unique(item.instances)) - 1
        from recapprox.geometry import class_instances

        assert len(class_instances(weak)) == n_inst


def test_weak_label_rejects_bad_shrink():
    with pytest.raises(ValueError):
        make_weak_label(disk(16, (8, 8), 5), 1.0, seeded_rng(0))


def _scene_from_ids(ids, touching):
    classes = [0] * int(ids.max())
    labels = np.where(ids > 0, 0, 1)
    return Scene(None, ClassMask(labels, 2), ids, classes, touching)


def test_scribbles_empty_without_touching():
    ids = np.zeros((20, 20), np.int32)
    ids[disk(20, (5, 5), 3)] = 1
    out = make_separation_scribbles(_scene_from_ids(ids, []))
    assert (out.labels == 1).all()


def test_scribbles_one_stroke_near_interface():
    ids = np.zeros((30, 30), np.int32)
    ids[5:25, 5:15] = 1
    ids[5:25, 15:25] = 2
    out = make_separation_scribbles(_scene_from_ids(ids, [(1, 2, True)]))
    stroke = out.labels == 0
    assert connected_components(stroke).count == 1
    interface = np.zeros_like(stroke)
    interface[5:25, 14:16] = True
    assert distance_transform(interface)[stroke].max() <= 2
    clear = make_separation_scribbles(_scene_from_ids(ids, [(1, 2, False)]))
    assert (clear.labels == 1).all()


def test_generated_scribbles_within_two_pixels():
    cfg = SceneConfig(touch_prob=1.0)
    for s in range(6):
        scene = generate_scene(cfg, seeded_rng(100 + s))
        strokes = make_separation_scribbles(scene).labels == 0
        low = [(a, b) for a, b, lo in scene.touching if lo]
        assert connected_components(strokes).count <= len(low)
        if not low:
            continue
        iface = np.zeros_like(strokes)
        cross = ndimage.generate_binary_structure(2, 1)
        for a, b in low:
            A, B = scene.instances == a, scene.instances == b
            iface |= (ndimage.binary_dilation(A, cross) & B) | (ndimage.binary_dilation(B, cross) & A)
        assert distance_transform(iface)[strokes].max() <= 2


def test_availability_identity(small_dataset):
    out = assign_availability(small_dataset, {1: 1.0, 2: 1.0, 3: 1.0}, seeded_rng(0))
    assert out == small_dataset


def test_availability_table_ratios():
    cfg = SceneConfig(size=32, instances=(1, 1), radius=(5, 6))
    ds = generate_dataset(cfg, 40)
    out = assign_availability(ds, {1: 0.1, 2: 0.75, 3: 1.0}, seeded_rng(1))
    assert [len(out.labeled(t)) for t in (1, 2, 3)] == [4, 30, 40]
    again = assign_availability(ds, {1: 0.1, 2: 0.75, 3: 1.0}, seeded_rng(1))
    assert [again.labeled(t) for t in (1, 2, 3)] == [out.labeled(t) for t in (1, 2, 3)]
    with pytest.raises(ValueError):
        assign_availability(ds, {1: 0.0}, seeded_rng(1))
    with pytest.raises(ValueError):
        assign_availability(ds, {1: 1.5}, seeded_rng(1))


def test_save_load_round_trip(tmp_path, small_dataset):
    ds = assign_availability(small_dataset, {1: 0.5, 2: 1.0, 3: 1.0}, seeded_rng(2))
    save_dataset(ds, tmp_path / "a")
    loaded = load_dataset(tmp_path / "a")
    assert loaded == ds
    save_dataset(loaded, tmp_path / "b")
    for f in sorted((tmp_path / "a").rglob("*")):
        if f.is_file():
            assert f.read_bytes() == (tmp_path / "b" / f.relative_to(tmp_path / "a")).read_bytes()


def test_tampered_file_is_reported(tmp_path, small_dataset):
    save_dataset(small_dataset, tmp_path)
    target = tmp_path / "labels" / "task2" / "0001.pgm"
    data = bytearray(target.read_bytes())
    data[-1] ^= 1
    target.write_bytes(bytes(data))
    with pytest.raises(DataError, match="0001.pgm"):
        load_dataset(tmp_path)


def test_unknown_task_id_rejected(tmp_path, small_dataset):
    save_dataset(small_dataset, tmp_path)
    manifest = tmp_path / "manifest.txt"
    text = manifest.read_text().replace("item.0000.task3 =", "item.0000.task7 =")
    manifest.write_text(text)
    with pytest.raises(DataError, match="unknown task id 7"):
        load_dataset(tmp_path)


def test_missing_file_and_manifest(tmp_path, small_dataset):
    with pytest.raises(DataError):
        load_dataset(tmp_path / "nowhere")
    save_dataset(small_dataset, tmp_path)
    (tmp_path / "gt" / "0002.pgm").unlink()
    with pytest.raises(DataError, match="0002.pgm"):
        load_dataset(tmp_path)
