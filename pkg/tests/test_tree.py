import json
import random

import pytest

import agingtree.tree as tree_mod
from agingtree.tree import BranchRequest, TreeService, TreeStore, render_ascii


@pytest.fixture
def store(tmp_path, toy_image):
    store = TreeStore(tmp_path / "tree")
    store.create(toy_image, "person", age=30, backend_id="toy",
                 settings={"seed": 0, "steps": 4, "preset": "replace_v", "key_gain": 1.0})
    return store


@pytest.fixture
def service(store, toy_backend):
    return TreeService(store, backend=toy_backend)


class TestCreate:
    def test_root_only_manifest(self, store):
        manifest = store.load()
        root = manifest.root()
        assert root.parent_id is None
        assert root.condition == ""
        assert len(manifest.nodes) == 1
        assert store.image_path(root.id).exists()

    def test_refuses_overwrite(self, store, toy_image):
        with pytest.raises(FileExistsError):
            store.create(toy_image, "person", age=30)

    def test_unreadable_image(self, tmp_path):
        store = TreeStore(tmp_path / "t2")
        with pytest.raises(IOError):
            store.create(tmp_path / "missing.png", "person", age=30)

    def test_reload_round_trip(self, store):
        manifest = store.load()
        again = store.load()
        assert manifest.to_json() == again.to_json()


class TestManifest:
    def test_unknown_fields_preserved_on_rewrite(self, store):
        raw = json.loads(store.manifest_path.read_text())
        raw["future_field"] = {"keep": "me"}
        raw["nodes"][0]["future_node_field"] = 42
        store.manifest_path.write_text(json.dumps(raw))
        manifest = store.load()
        store.save(manifest)
        rewritten = json.loads(store.manifest_path.read_text())
        assert rewritten["future_field"] == {"keep": "me"}
        assert rewritten["nodes"][0]["future_node_field"] == 42

    def test_validation_rejects_cycles(self, store):
        manifest = store.load()
        root = manifest.root()
        raw = json.loads(store.manifest_path.read_text())
        raw["nodes"][0]["parent_id"] = root.id  # self-loop
        store.manifest_path.write_text(json.dumps(raw))
        with pytest.raises(ValueError):
            store.load()

    def test_validation_rejects_missing_parent(self, store):
        raw = json.loads(store.manifest_path.read_text())
        raw["nodes"].append(dict(raw["nodes"][0], id="node-x", parent_id="node-ghost"))
        store.manifest_path.write_text(json.dumps(raw))
        with pytest.raises(ValueError, match="missing parent"):
            store.load()


class TestBranch:
    def test_happy_path_reaches_done(self, service, store):
        root = service.manifest.root()
        job_id, node_id = service.create_branch(
            BranchRequest(parent_id=root.id, condition="hair loss", age_target=60)
        )
        assert service.job_status(job_id) == ("pending", None)
        service.run_pending()
        assert service.job_status(job_id) == ("done", None)
        node = service.manifest.nodes[node_id]
        assert store.image_path(node_id).exists()
        assert "60" in node.refined_prompt
        assert store.load().nodes[node_id].job_state == "done"

    def test_unknown_parent(self, service):
        with pytest.raises(KeyError):
            service.create_branch(BranchRequest(parent_id="node-ghost", condition="", age_target=60))

    def test_invalid_age(self, service):
        root = service.manifest.root()
        with pytest.raises(ValueError):
            service.create_branch(BranchRequest(parent_id=root.id, condition="", age_target=19))

    def test_branch_from_pending_parent_rejected(self, service):
        root = service.manifest.root()
        _, node_id = service.create_branch(BranchRequest(parent_id=root.id, condition="x", age_target=50))
        with pytest.raises(ValueError, match="pending"):
            service.create_branch(BranchRequest(parent_id=node_id, condition="y", age_target=60))

    def test_different_conditions_different_images(self, service, store):
        root = service.manifest.root()
        ids = []
        for condition in ("hair loss", "gain weight"):
            _, node_id = service.create_branch(
                BranchRequest(parent_id=root.id, condition=condition, age_target=60)
            )
            ids.append(node_id)
        service.run_pending()
        a, b = (store.image_path(i).read_bytes() for i in ids)
        assert a != b

    def test_same_request_deterministic_bytes(self, service, store):
        root = service.manifest.root()
        ids = []
        for _ in range(2):
            _, node_id = service.create_branch(
                BranchRequest(parent_id=root.id, condition="hair loss", age_target=60, seed=0)
            )
            ids.append(node_id)
        service.run_pending()
        a, b = (store.image_path(i).read_bytes() for i in ids)
        assert a == b

    def test_grandchild_edits_parent_image_by_default(self, service, store):
        root = service.manifest.root()
        _, child = service.create_branch(BranchRequest(parent_id=root.id, condition="hair loss", age_target=50))
        service.run_pending()
        _, grandchild_chain = service.create_branch(
            BranchRequest(parent_id=child, condition="gain weight", age_target=70)
        )
        service.run_pending()
        _, grandchild_root = service.create_branch(
            BranchRequest(parent_id=child, condition="gain weight", age_target=70, from_root=True)
        )
        service.run_pending()
        chained = store.image_path(grandchild_chain).read_bytes()
        rooted = store.image_path(grandchild_root).read_bytes()
        assert chained != rooted  # compounding vs root-anchored edits

    def test_full_preset_branch_with_synthetic_direction(self, store, toy_backend):
        service = TreeService(store, backend=toy_backend)
        root = service.manifest.root()
        job_id, node_id = service.create_branch(
            BranchRequest(parent_id=root.id, condition="alcoholism", age_target=70, preset="full")
        )
        service.run_pending()
        assert service.job_status(job_id)[0] == "done"
        assert (store.reference_dir / root.id / "uniform-4" / "direction.json").exists()

    def test_inversion_cache_reused_across_branches(self, service, store):
        root = service.manifest.root()
        service.create_branch(BranchRequest(parent_id=root.id, condition="a", age_target=50))
        service.run_pending()
        cache_dir = store.features_dir / root.id / "uniform-4"
        stamp = (cache_dir / "cache.json").stat().st_mtime_ns
        service.create_branch(BranchRequest(parent_id=root.id, condition="b", age_target=60))
        service.run_pending()
        assert (cache_dir / "cache.json").stat().st_mtime_ns == stamp


class TestRecovery:
    def test_running_marked_failed_on_restart(self, store, toy_backend):
        service = TreeService(store, backend=toy_backend)
        root = service.manifest.root()
        job_id, node_id = service.create_branch(BranchRequest(parent_id=root.id, condition="x", age_target=50))
        manifest = store.load()
        manifest.nodes[node_id].job_state = "running"
        store.save(manifest)
        revived = TreeService(store, backend=toy_backend)
        assert revived.manifest.nodes[node_id].job_state == "failed"
        assert "restart" in revived.manifest.nodes[node_id].error

    def test_pending_requeued_on_restart(self, store, toy_backend):
        service = TreeService(store, backend=toy_backend)
        root = service.manifest.root()
        job_id, node_id = service.create_branch(BranchRequest(parent_id=root.id, condition="x", age_target=50))
        revived = TreeService(store, backend=toy_backend)
        revived.run_pending()
        assert revived.job_status(job_id)[0] == "done"

    def test_failed_job_records_diagnostic(self, store, toy_backend):
        service = TreeService(store, backend=toy_backend)
        root = service.manifest.root()
        job_id, node_id = service.create_branch(
            BranchRequest(parent_id=root.id, condition="x", age_target=50)
        )
        store.image_path(root.id).unlink()  # sabotage the parent image mid-flight
        service.run_pending()
        state, error = service.job_status(job_id)
        assert state == "failed"
        assert error
        assert store.load().nodes[node_id].job_state == "failed"


class TestDelete:
    def test_prune_subtree(self, service, store):
        root = service.manifest.root()
        _, child = service.create_branch(BranchRequest(parent_id=root.id, condition="a", age_target=50))
        service.run_pending()
        _, grandchild = service.create_branch(BranchRequest(parent_id=child, condition="b", age_target=60))
        service.run_pending()
        deleted = service.delete_node(child)
        assert set(deleted) == {child, grandchild}
        assert child not in service.manifest.nodes
        assert not store.image_path(child).exists()

    def test_refuses_root(self, service):
        with pytest.raises(ValueError):
            service.delete_node(service.manifest.root().id)

    def test_refuses_while_job_active(self, service):
        root = service.manifest.root()
        _, child = service.create_branch(BranchRequest(parent_id=root.id, condition="a", age_target=50))
        with pytest.raises(RuntimeError, match="active"):
            service.delete_node(child)


class TestCrashSafety:
    def test_randomized_kill_points_never_corrupt_manifest(self, store, monkeypatch):
        manifest = store.load()
        before = store.manifest_path.read_bytes()
        rng = random.Random(1234)

        class Killed(RuntimeError):
            pass

        for _ in range(20):
            stage = rng.choice(["partial-write", "before-rename", "after-write-no-rename"])
            fraction = rng.random()

            def partial_write(handle, payload, fraction=fraction, stage=stage):
                if stage == "partial-write":
                    handle.write(payload[: int(len(payload) * fraction)])
                    raise Killed()
                handle.write(payload)
                if stage == "after-write-no-rename":
                    raise Killed()

            if stage == "before-rename":
                monkeypatch.setattr(tree_mod.os, "replace", lambda *a: (_ for _ in ()).throw(Killed()))
            else:
                monkeypatch.setattr(tree_mod, "_write_payload", partial_write)

            manifest.subject_desc = f"mutation-{rng.random()}"
            with pytest.raises(Killed):
                store.save(manifest)
            monkeypatch.undo()

            on_disk = store.manifest_path.read_bytes()
            assert on_disk == before  # old manifest intact
            reloaded = store.load()  # parses and validates
            reloaded.validate()

    def test_successful_write_after_failures(self, store, monkeypatch):
        manifest = store.load()
        manifest.subject_desc = "updated"
        store.save(manifest)
        assert store.load().subject_desc == "updated"


class TestAscii:
    def test_single_node(self, service):
        art = render_ascii(service.manifest)
        assert "(root)" in art and art.count("\n") == 1

    def test_chain_renders_edges(self, service):
        root = service.manifest.root()
        _, child = service.create_branch(BranchRequest(parent_id=root.id, condition="hair loss", age_target=50))
        service.run_pending()
        art = render_ascii(service.manifest)
        assert "hair loss" in art
        assert "`--" in art
