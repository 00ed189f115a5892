import numpy as np
import pytest
import torch

from pairmask.masking import MaskMap, Modality, ModalityImage, fuse_masks
from pairmask.model import (
    EmaState,
    Encoder,
    ModalityClassifierHead,
    ModelConfig,
    PredictionHead,
    PretrainModel,
    Role,
    ema_update,
    flatten_params,
    load_model_params,
    load_named_tensors,
    patchify,
    save_model_params,
    save_named_tensors,
    sincos_position_encoding,
    unflatten_into,
    unpatchify,
)

torch.set_default_dtype(torch.float64)
torch.set_num_threads(1)

TOY = ModelConfig.toy(image_size=32)


def toy_image(seed=0, size=32, patch=16):
    rng = np.random.default_rng(seed)
    return ModalityImage(rng.random((size, size, 3)), Modality.RGB, patch)


def toy_encoder(seed=0, config=TOY):
    torch.manual_seed(seed)
    return Encoder(config).double().eval()


class TestPatchify:
    def test_full_scale_patch_count(self):
        img = ModalityImage(np.zeros((320, 320, 3)), Modality.RGB, 16)
        patches = patchify(img, 16)
        assert patches.shape == (400, 768)

    def test_toy_patch_count(self):
        assert patchify(toy_image(), 16).shape == (4, 768)

    def test_round_trip_exact(self):
        img = toy_image(3)
        patches = patchify(img, 16)
        back = unpatchify(patches, (2, 2), 16)
        assert np.array_equal(back, img.pixels)

    def test_indivisible_rejected(self):
        img = toy_image()
        with pytest.raises(ValueError):
            patchify(img, 7)


class TestEmbedTokens:
    def test_position_zero_encoding(self):
        table = sincos_position_encoding((4, 4), 64).numpy()
        assert np.allclose(table[0, 0::2], 0.0)  # all sines at coord 0
        assert np.allclose(table[0, 1::2], 1.0)  # all cosines at coord 0

    def test_identical_patches_differ_by_position_only(self):
        enc = toy_encoder()
        patches = torch.ones(2, TOY.patch_dim)
        seq = enc.embed_tokens(patches, Modality.RGB)
        diff = seq.tokens[0] - seq.tokens[1]
        pos_diff = (enc.pos_embed[0] - enc.pos_embed[1]).to(diff.dtype)
        assert torch.allclose(diff, pos_diff, atol=1e-12)

    def test_modality_embedding_difference(self):
        enc = toy_encoder()
        patches = torch.randn(3, TOY.patch_dim)
        rgb = enc.embed_tokens(patches, Modality.RGB)
        other = enc.embed_tokens(patches, Modality.OTHER)
        expected = enc.modality_embed[0] - enc.modality_embed[1]
        assert torch.allclose(rgb.tokens - other.tokens, expected.expand(3, -1), atol=1e-12)

    def test_dim_mismatch_rejected(self):
        enc = toy_encoder()
        with pytest.raises(ValueError):
            enc.embed_tokens(torch.zeros(2, 10), Modality.RGB)


class TestEncode:
    def test_student_equals_teacher_when_unmasked(self):
        enc = toy_encoder()
        seq = enc.embed_tokens(torch.randn(4, TOY.patch_dim), Modality.RGB)
        mask = MaskMap(np.zeros((2, 2), bool))
        student = enc.encode(seq, mask, Role.STUDENT)
        teacher = enc.encode(seq, None, Role.TEACHER)
        assert torch.allclose(student.tokens, teacher.tokens, atol=1e-12)

    def test_student_drops_masked_tokens(self):
        enc = toy_encoder()
        seq = enc.embed_tokens(torch.randn(4, TOY.patch_dim), Modality.RGB)
        mask = MaskMap(np.array([[True, False], [False, True]]))
        out = enc.encode(seq, mask, Role.STUDENT)
        assert out.tokens.shape[0] == 2
        assert out.positions == [1, 2]

    def test_all_masked_rejected(self):
        enc = toy_encoder()
        seq = enc.embed_tokens(torch.randn(4, TOY.patch_dim), Modality.RGB)
        with pytest.raises(ValueError):
            enc.encode(seq, MaskMap(np.ones((2, 2), bool)), Role.STUDENT)

    def test_teacher_output_carries_no_grad(self):
        enc = toy_encoder()
        seq = enc.embed_tokens(torch.randn(4, TOY.patch_dim), Modality.RGB)
        out = enc.encode(seq, None, Role.TEACHER)
        assert not out.tokens.requires_grad

    def test_permutation_equivariance(self):
        config = ModelConfig.toy(image_size=64)  # 16 tokens
        torch.manual_seed(1)
        enc = Encoder(config).double().eval()
        tokens = torch.randn(16, config.encoder_dim)
        from pairmask.model import TokenSequence

        base = enc.encode(
            TokenSequence(tokens, list(range(16)), Modality.RGB), None, Role.STUDENT
        )
        perm = torch.randperm(16, generator=torch.Generator().manual_seed(5))
        permuted = enc.encode(
            TokenSequence(tokens[perm], [int(i) for i in perm], Modality.RGB),
            None,
            Role.STUDENT,
        )
        by_pos = dict(zip(permuted.positions, permuted.tokens))
        restored = torch.stack([by_pos[i] for i in range(16)])
        assert torch.max(torch.abs(restored - base.tokens)) < 1e-6


class TestEmaUpdate:
    def test_momentum_one_unchanged(self):
        state = EmaState(torch.ones(5), 1.0)
        out = ema_update(state, torch.zeros(5))
        assert torch.equal(out.teacher_params, torch.ones(5))

    def test_momentum_zero_copies_student(self):
        state = EmaState(torch.ones(5), 0.0)
        out = ema_update(state, torch.full((5,), 3.0))
        assert torch.equal(out.teacher_params, torch.full((5,), 3.0))

    def test_geometric_decay(self):
        state = EmaState(torch.ones(3), 0.99)
        student = torch.zeros(3)
        for k in range(1, 11):
            state = ema_update(state, student)
            assert torch.allclose(
                state.teacher_params, torch.full((3,), 0.99**k), atol=1e-14
            )

    def test_contraction_exact(self):
        rng = np.random.default_rng(0)
        state = EmaState(torch.from_numpy(rng.normal(size=20)), 0.9)
        student = torch.from_numpy(rng.normal(size=20))
        prev_gap = float((state.teacher_params - student).norm())
        for _ in range(5):
            state = ema_update(state, student)
            gap = float((state.teacher_params - student).norm())
            assert gap == pytest.approx(0.9 * prev_gap, rel=1e-12)
            prev_gap = gap

    def test_layout_mismatch_rejected(self):
        with pytest.raises(ValueError):
            ema_update(EmaState(torch.zeros(3), 0.5), torch.zeros(4))


class TestFusion:
    def make_model(self, seed=0, config=TOY):
        torch.manual_seed(seed)
        return PretrainModel(config).double().eval()

    def test_rgb_only_position_is_projected_rgb(self):
        model = self.make_model()
        patches = torch.randn(4, TOY.patch_dim)
        s_rgb = model.student.encode(
            model.student.embed_tokens(patches, Modality.RGB),
            MaskMap(np.array([[False, True], [True, True]])),  # keeps position 0
            Role.STUDENT,
        )
        s_other = model.student.encode(
            model.student.embed_tokens(patches, Modality.OTHER),
            MaskMap(np.array([[True, False], [True, True]])),  # keeps position 1
            Role.STUDENT,
        )
        combined = model.fusion.combine(s_rgb, s_other)
        assert combined.positions == [0, 1]
        assert torch.allclose(
            combined.tokens[0], model.fusion.proj_rgb(s_rgb.tokens[0]), atol=1e-12
        )
        assert torch.allclose(
            combined.tokens[1], model.fusion.proj_other(s_other.tokens[0]), atol=1e-12
        )

    def test_mean_of_equal_projected_tokens(self):
        model = self.make_model()
        # force equal projections by making both projections identical and
        # feeding the same token
        model.fusion.proj_other.load_state_dict(model.fusion.proj_rgb.state_dict())
        from pairmask.model import TokenSequence

        tok = torch.randn(1, TOY.encoder_dim)
        seq_rgb = TokenSequence(tok, [0], Modality.RGB)
        seq_other = TokenSequence(tok.clone(), [0], Modality.OTHER)
        combined = model.fusion.combine(seq_rgb, seq_other)
        assert torch.allclose(combined.tokens[0], model.fusion.proj_rgb(tok[0]), atol=1e-12)

    def test_union_positions_complement_fused_mask(self):
        model = self.make_model(config=ModelConfig.toy(image_size=64))
        rng = np.random.default_rng(9)
        patches = torch.randn(16, ModelConfig.toy(64).patch_dim)
        for _ in range(25):
            m_rgb = MaskMap(rng.random((4, 4)) < 0.5)
            m_other = MaskMap(rng.random((4, 4)) < 0.5)
            if m_rgb.masked.all() or m_other.masked.all():
                continue
            s_rgb = model.student.encode(
                model.student.embed_tokens(patches, Modality.RGB), m_rgb, Role.STUDENT
            )
            s_other = model.student.encode(
                model.student.embed_tokens(patches, Modality.OTHER), m_other, Role.STUDENT
            )
            fused = model.fusion(s_rgb, s_other)
            expected = sorted(
                int(i) for i in np.flatnonzero(~fuse_masks(m_rgb, m_other).masked.ravel())
            )
            assert fused.positions == expected


class TestDecoder:
    def make_model(self, seed=0):
        torch.manual_seed(seed)
        return PretrainModel(TOY).double().eval()

    def fused_context(self, model):
        patches = torch.randn(4, TOY.patch_dim)
        s_rgb = model.student.encode(
            model.student.embed_tokens(patches, Modality.RGB), None, Role.STUDENT
        )
        s_other = model.student.encode(
            model.student.embed_tokens(patches, Modality.OTHER), None, Role.STUDENT
        )
        return model.fusion(s_rgb, s_other)

    def test_zero_targets_empty_output(self):
        model = self.make_model()
        out = model.decoder(self.fused_context(model), [], Modality.RGB)
        assert out.tokens.shape == (0, TOY.decoder_dim)

    def test_k_targets_k_rows(self):
        model = self.make_model()
        out = model.decoder(self.fused_context(model), [1, 3], Modality.OTHER)
        assert out.tokens.shape == (2, TOY.decoder_dim)
        assert out.positions == [1, 3]

    def test_distinct_positions_give_distinct_outputs(self):
        model = self.make_model()
        fused = self.fused_context(model)
        a = model.decoder(fused, [1], Modality.RGB)
        b = model.decoder(fused, [2], Modality.RGB)
        assert not torch.allclose(a.tokens, b.tokens)


class TestPredictionHead:
    def test_zero_input_gives_bias(self):
        torch.manual_seed(0)
        head = PredictionHead(TOY).double()
        from pairmask.model import TokenSequence

        out = head(TokenSequence(torch.zeros(3, TOY.decoder_dim), [0, 1, 2], Modality.RGB))
        assert torch.allclose(out.tokens, head.proj.bias.expand(3, -1))

    def test_affine_linearity(self):
        torch.manual_seed(0)
        head = PredictionHead(TOY).double()
        from pairmask.model import TokenSequence

        a = torch.randn(2, TOY.decoder_dim)
        b = torch.randn(2, TOY.decoder_dim)
        fa = head(TokenSequence(a, [0, 1], Modality.RGB)).tokens
        fb = head(TokenSequence(b, [0, 1], Modality.RGB)).tokens
        fab = head(TokenSequence(a + b, [0, 1], Modality.RGB)).tokens
        assert torch.allclose(fab, fa + fb - head.proj.bias, atol=1e-10)

    def test_output_dim(self):
        torch.manual_seed(0)
        head = PredictionHead(TOY).double()
        from pairmask.model import TokenSequence

        out = head(TokenSequence(torch.randn(5, TOY.decoder_dim), list(range(5)), Modality.RGB))
        assert out.tokens.shape == (5, TOY.encoder_dim)


class TestModalityClassifier:
    def test_zero_head_gives_zero_logits(self):
        head = ModalityClassifierHead(8).double()
        with torch.no_grad():
            head.linear.weight.zero_()
            head.linear.bias.zero_()
        logits = head(torch.randn(4, 8))
        assert torch.all(logits == 0)
        assert torch.all(torch.sigmoid(logits) == 0.5)

    def test_basis_vector_dot_product(self):
        head = ModalityClassifierHead(4).double()
        with torch.no_grad():
            head.linear.weight.zero_()
            head.linear.weight[0, 0] = 1.0
            head.linear.bias.zero_()
        tok = torch.zeros(1, 4)
        tok[0, 0] = 3.0
        assert float(head(tok).detach()) == pytest.approx(3.0)

    def test_batch_equals_loop_oracle(self):
        torch.manual_seed(2)
        head = ModalityClassifierHead(6).double()
        tokens = torch.randn(7, 6)
        batch = head(tokens)
        loop = torch.stack([head(tokens[i : i + 1])[0] for i in range(7)])
        assert torch.allclose(batch, loop, atol=1e-14)

    def test_dim_mismatch_rejected(self):
        head = ModalityClassifierHead(6).double()
        with pytest.raises(ValueError):
            head(torch.randn(2, 5))


class TestTeacherStudentContract:
    def test_teacher_initialized_as_copy(self):
        torch.manual_seed(3)
        model = PretrainModel(TOY).double()
        assert torch.equal(flatten_params(model.student), flatten_params(model.teacher))

    def test_ema_step_matches_manual_recomputation(self):
        torch.manual_seed(4)
        model = PretrainModel(TOY).double()
        with torch.no_grad():
            for p in model.student.parameters():
                p.add_(torch.randn_like(p) * 0.1)
        teacher_before = flatten_params(model.teacher)
        student = flatten_params(model.student)
        model.ema_step(0.996)
        expected = 0.996 * teacher_before + 0.004 * student
        assert torch.allclose(flatten_params(model.teacher), expected, atol=1e-14)

    def test_unflatten_round_trip(self):
        torch.manual_seed(5)
        enc = Encoder(TOY).double()
        flat = flatten_params(enc)
        torch.manual_seed(6)
        other = Encoder(TOY).double()
        unflatten_into(other, flat)
        assert torch.equal(flatten_params(other), flat)


class TestSerialization:
    def test_named_tensor_round_trip(self, tmp_path):
        tensors = {
            "a": torch.randn(3, 4),
            "b/c": torch.arange(5, dtype=torch.int64),
        }
        path = tmp_path / "t.tensors"
        save_named_tensors(tensors, path)
        loaded = load_named_tensors(path)
        assert set(loaded) == {"a", "b/c"}
        for k in tensors:
            assert torch.equal(loaded[k], tensors[k])

    def test_truncated_file_rejected(self, tmp_path):
        path = tmp_path / "t.tensors"
        save_named_tensors({"a": torch.randn(100, 100)}, path)
        data = path.read_bytes()
        path.write_bytes(data[: len(data) - 50])
        with pytest.raises(ValueError, match="truncated"):
            load_named_tensors(path)

    def test_model_params_round_trip(self, tmp_path):
        torch.manual_seed(7)
        model = PretrainModel(TOY).double()
        path = tmp_path / "m.tensors"
        save_model_params(model, path)
        torch.manual_seed(8)
        other = PretrainModel(TOY).double()
        load_model_params(other, path)
        assert torch.equal(flatten_params(model.student), flatten_params(other.student))
        assert torch.equal(flatten_params(model.teacher), flatten_params(other.teacher))

    def test_config_mismatch_names_first_tensor(self, tmp_path):
        torch.manual_seed(9)
        small = PretrainModel(TOY).double()
        path = tmp_path / "m.tensors"
        save_model_params(small, path)
        big = PretrainModel(ModelConfig.toy(image_size=64)).double()
        # same tensor shapes except position tables; different encoder dim config
        other_cfg = ModelConfig(
            encoder_dim=32, encoder_mlp_dim=64, encoder_layers=2, encoder_heads=4,
            fusion_dim=32, fusion_mlp_dim=64, fusion_layers=3, fusion_heads=2,
            decoder_dim=32, decoder_mlp_dim=64, decoder_layers=4, decoder_heads=2,
            patch_size=16, image_size=32, dropout=0.0, drop_path=0.0,
        )
        mismatched = PretrainModel(other_cfg).double()
        with pytest.raises(ValueError, match="shape mismatch for"):
            load_model_params(mismatched, path)


class TestModelConfigValidation:
    def test_bad_head_divisibility(self):
        with pytest.raises(ValueError):
            ModelConfig(encoder_dim=65)

    def test_bad_image_divisibility(self):
        with pytest.raises(ValueError):
            ModelConfig(image_size=100)
