#include <gtest/gtest.h>

#include <cstdio>
#include <filesystem>
#include <fstream>
#include <random>
#include <set>

#include <unistd.h>

#include "support.hpp"

using namespace ttacil;
using ttacil::test::jitter_all;
using ttacil::test::random_tensor;
using ttacil::test::tiny_encoder_config;

namespace {

Tensor random_batch(std::size_t n, std::size_t size, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  return random_tensor(Shape{n, size, size, 1}, rng, 0.0, 1.0);
}

void zero_all(ParameterStore& s) {
  for (auto& e : s.entries_mut()) e.value.fill(0.0);
}

// Copies every parameter that `dst` has from `src`, by name.
void copy_shared(const ParameterStore& src, ParameterStore& dst) {
  for (auto& e : dst.entries_mut()) e.value = src.get(e.name);
}

std::string temp_path(const std::string& stem) {
  return (std::filesystem::temp_directory_path() / (stem + "_" + std::to_string(::getpid()))).string();
}

}  // namespace

TEST(Config, RejectsInconsistentSizes) {
  EncoderConfig c = tiny_encoder_config();
  c.image_size = 10;
  EXPECT_THROW(VitEncoder(c, 0), std::invalid_argument);
  c = tiny_encoder_config();
  c.heads = 3;
  EXPECT_THROW(VitEncoder(c, 0), std::invalid_argument);
  c = tiny_encoder_config();
  c.adapter.hidden_dim = c.embed_dim;
  EXPECT_THROW(VitEncoder(c, 0), std::invalid_argument);
}

TEST(PatchEmbed, EightByEightWithPatchFourGivesFiveTokens) {
  VitEncoder enc(tiny_encoder_config(), 1);
  ag::Tape tape;
  ParamBinding bind(tape, enc.params(), {});
  auto tokens = enc.embed(bind, random_batch(1, 8, 2));
  EXPECT_EQ(tokens.shape(), (Shape{5, 8}));
}

TEST(PatchEmbed, ZeroImageAndProjectionGiveCls) {
  VitEncoder enc(tiny_encoder_config(), 1);
  enc.params().get_mut("patch_embed.weight").fill(0.0);
  ag::Tape tape;
  ParamBinding bind(tape, enc.params(), {});
  const Tensor t = enc.embed(bind, Tensor(Shape{1, 8, 8, 1}, 0.0)).value();
  const Tensor& pos = enc.params().get("pos_embed");
  const Tensor& cls = enc.params().get("cls_token");
  for (std::size_t c = 0; c < 8; ++c) EXPECT_EQ(t.at(0, c), cls[c] + pos.at(0, c));
  for (std::size_t r = 1; r < 5; ++r) {
    for (std::size_t c = 0; c < 8; ++c) EXPECT_EQ(t.at(r, c), pos.at(r, c));
  }
}

TEST(PatchEmbed, WrongImageShapeIsRejected) {
  VitEncoder enc(tiny_encoder_config(), 1);
  EXPECT_THROW(enc.encode(random_batch(2, 12, 1)), ShapeError);
}

TEST(Adapter, HandEvaluatedBranch) {
  EncoderConfig c;
  c.image_size = 4;
  c.patch_size = 4;
  c.embed_dim = 2;
  c.depth = 1;
  c.heads = 1;
  c.adapter.hidden_dim = 1;
  c.adapter.scale = 2.0;
  VitEncoder enc(c, 0);
  auto& s = enc.params();
  s.get_mut("blocks.0.adapter.down.weight") = Tensor(Shape{2, 1}, std::vector<double>{1, 1});
  s.get_mut("blocks.0.adapter.up.weight") = Tensor(Shape{1, 2}, std::vector<double>{0.5, 0.5});
  ag::Tape tape;
  ParamBinding bind(tape, s, {});
  auto out = enc.adapter_branch(bind, "blocks.0", tape.constant(Tensor(Shape{1, 2}, 1.0)));
  EXPECT_EQ(out.value().storage(), (std::vector<double>{2, 2}));

  // Inside a block whose MLP and attention are zero and whose second LN emits [1,1].
  for (const auto& n : enc.params().names_in(ParamGroup::Backbone)) {
    if (n.starts_with("blocks.0.")) s.get_mut(n).fill(0.0);
  }
  s.get_mut("blocks.0.norm2.gamma").fill(0.0);
  s.get_mut("blocks.0.norm2.beta").fill(1.0);
  const Tensor x(Shape{2, 2}, std::vector<double>{0.3, -0.7, 1.1, 0.4});
  auto y = enc.block(bind, 0, tape.constant(x), 1);
  for (std::size_t i = 0; i < 4; ++i) EXPECT_DOUBLE_EQ(y.value()[i], x[i] + 2.0);
}

TEST(Adapter, ZeroDownProjectionOrZeroScaleLeavesPlainMlp) {
  EncoderConfig with = tiny_encoder_config();
  EncoderConfig without = with;
  without.adapter.enabled = false;
  VitEncoder a(with, 4);
  jitter_all(a.params(), 5);
  VitEncoder plain(without, 4);
  copy_shared(a.params(), plain.params());
  const Tensor x = random_batch(3, 8, 6);
  const Tensor zp = plain.encode(x);

  VitEncoder down0 = a;
  for (std::size_t b = 0; b < with.depth; ++b) {
    down0.params().get_mut(VitEncoder::block_prefix(b) + ".adapter.down.weight").fill(0.0);
    down0.params().get_mut(VitEncoder::block_prefix(b) + ".adapter.down.bias").fill(0.0);
    down0.params().get_mut(VitEncoder::block_prefix(b) + ".adapter.up.bias").fill(0.0);
  }
  EXPECT_LT(max_abs_diff(down0.encode(x), zp), 1e-12);

  EncoderConfig s0 = with;
  s0.adapter.scale = 0.0;
  VitEncoder scaled(s0, 4);
  copy_shared(a.params(), scaled.params());
  EXPECT_LT(max_abs_diff(scaled.encode(x), zp), 1e-12);

  // Sanity: the trained adapter does change z when s > 0.
  EXPECT_GT(max_abs_diff(a.encode(x), zp), 1e-6);
}

TEST(Block, AllZeroWeightsIsIdentity) {
  VitEncoder enc(tiny_encoder_config(), 2);
  zero_all(enc.params());
  std::mt19937_64 rng(3);
  const Tensor x = random_tensor(Shape{2 * 5, 8}, rng);
  ag::Tape tape;
  ParamBinding bind(tape, enc.params(), {});
  auto y = enc.block(bind, 0, tape.constant(x), 2);
  EXPECT_TRUE(bitwise_equal(y.value(), x));
}

TEST(Block, SingleTokenAttentionReturnsValue) {
  std::mt19937_64 rng(4);
  const std::size_t d = 6;
  const Tensor qkv = random_tensor(Shape{3, 3 * d}, rng);
  ag::Tape tape;
  auto out = ag::attention(tape.constant(qkv), 3, 1, 2);
  for (std::size_t r = 0; r < 3; ++r) {
    for (std::size_t c = 0; c < d; ++c) EXPECT_DOUBLE_EQ(out.value().at(r, c), qkv.at(r, 2 * d + c));
  }
}

TEST(Encode, IsDeterministicAndHasEmbedDim) {
  VitEncoder enc(tiny_encoder_config(), 7);
  jitter_all(enc.params(), 1);
  const Tensor x = random_batch(4, 8, 8);
  const Tensor a = enc.encode(x), b = enc.encode(x);
  EXPECT_EQ(a.shape(), (Shape{4, 8}));
  EXPECT_TRUE(bitwise_equal(a, b));
}

TEST(Encode, RowsDependOnlyOnTheirImage) {
  VitEncoder enc(tiny_encoder_config(), 7);
  jitter_all(enc.params(), 1);
  const Tensor x = random_batch(5, 8, 9);
  const Tensor all = enc.encode(x, 2);
  for (std::size_t i = 0; i < 5; ++i) {
    Tensor one(Shape{1, 8, 8, 1}, std::vector<double>(x.data().begin() + i * 64, x.data().begin() + (i + 1) * 64));
    const Tensor z = enc.encode(one);
    for (std::size_t c = 0; c < 8; ++c) EXPECT_EQ(z[c], all.at(i, c));
  }
}

TEST(Encode, EveryNormGammaInfluencesFeatures) {
  VitEncoder enc(tiny_encoder_config(), 10);
  jitter_all(enc.params(), 11);
  const Tensor x = random_batch(2, 8, 12);
  const Tensor z0 = enc.encode(x);
  std::mt19937_64 rng(13);
  for (const auto& name : enc.params().names_in(ParamGroup::Norm)) {
    if (!name.ends_with(".gamma")) continue;
    VitEncoder probe = enc;
    for (auto& v : probe.params().get_mut(name).data()) v += std::uniform_real_distribution<double>(0.05, 0.1)(rng);
    EXPECT_GT(max_abs_diff(probe.encode(x), z0), 1e-9) << name;
  }
}

TEST(Encode, TokenPermutationEquivarianceOfUnmaskedAttention) {
  std::mt19937_64 rng(14);
  const std::size_t T = 4, d = 6;
  const Tensor qkv = random_tensor(Shape{T, 3 * d}, rng);
  const std::vector<std::size_t> perm{2, 0, 3, 1};
  Tensor permuted(Shape{T, 3 * d});
  for (std::size_t t = 0; t < T; ++t) {
    for (std::size_t c = 0; c < 3 * d; ++c) permuted.at(t, c) = qkv.at(perm[t], c);
  }
  ag::Tape tape;
  const Tensor a = ag::attention(tape.constant(qkv), 1, T, 3).value();
  const Tensor b = ag::attention(tape.constant(permuted), 1, T, 3).value();
  for (std::size_t t = 0; t < T; ++t) {
    for (std::size_t c = 0; c < d; ++c) EXPECT_NEAR(b.at(t, c), a.at(perm[t], c), 1e-12);
  }
}

TEST(Encode, GradientMatchesFiniteDifferencesForEveryGroup) {
  VitEncoder enc(tiny_encoder_config(), 15);
  jitter_all(enc.params(), 16);
  const Tensor x = random_batch(2, 8, 17);
  std::mt19937_64 rng(18);
  const Tensor w = random_tensor(Shape{2, 8}, rng);
  // Every norm and adapter tensor, plus a few backbone tensors.
  std::vector<std::string> names = select_parameters(enc.params(), TrainMode::Norm);
  for (const auto& n : select_parameters(enc.params(), TrainMode::Adapter)) names.push_back(n);
  for (const char* n : {"patch_embed.weight", "cls_token", "pos_embed", "blocks.1.attn.qkv.weight",
                        "blocks.0.mlp.fc1.bias"}) {
    names.push_back(n);
  }
  auto r = test::check_gradients(enc.params(), names, [&](ParamBinding& b) {
    auto z = enc.forward(b, x);
    return ag::sum(ag::mul(ag::mul(z, z), b.tape().constant(w)));
  });
  EXPECT_LT(r.max_rel_error, 1e-4);
}

TEST(SelectParameters, NormModeCountsEveryLayerNorm) {
  for (std::size_t depth : {1, 2, 4}) {
    EncoderConfig c = tiny_encoder_config();
    c.depth = depth;
    VitEncoder enc(c, 0);
    const auto norm = select_parameters(enc.params(), TrainMode::Norm);
    EXPECT_EQ(norm.size(), 2 * (2 * depth + 1));
    for (const auto& n : norm) EXPECT_EQ(enc.params().entry(n).group, ParamGroup::Norm);
  }
}

TEST(SelectParameters, AdapterCountMatchesFormula) {
  for (bool learnable : {false, true}) {
    EncoderConfig c;  // default desk-scale model
    c.adapter.learnable_scale = learnable;
    VitEncoder enc(c, 0);
    std::size_t n = 0;
    for (const auto& name : select_parameters(enc.params(), TrainMode::Adapter)) n += enc.params().get(name).numel();
    EXPECT_EQ(n, c.expected_adapter_numel());
    EXPECT_EQ(n, c.depth * (2 * 64 * 8 + 8 + 64 + (learnable ? 1 : 0)));
  }
}

TEST(SelectParameters, AdapterFractionOfDeskModel) {
  VitEncoder enc(EncoderConfig{}, 0);
  const double phi = static_cast<double>(enc.params().numel(ParamGroup::Adapter));
  const double theta = static_cast<double>(enc.params().numel(ParamGroup::Backbone));
  const double frac = phi / (phi + theta);
  RecordProperty("adapter_fraction", std::to_string(frac));
  std::printf("adapter parameters: %.0f of %.0f (%.2f%%)\n", phi, phi + theta, 100.0 * frac);
  EXPECT_GT(frac, 0.0);
  EXPECT_LT(frac, 1.0);
}

TEST(SelectParameters, GroupsPartitionTheStore) {
  VitEncoder enc(tiny_encoder_config(), 0);
  attach_head(enc, 3);
  const auto norm = select_parameters(enc.params(), TrainMode::Norm);
  const auto adapter = select_parameters(enc.params(), TrainMode::Adapter);
  const auto all = select_parameters(enc.params(), TrainMode::All);
  const auto head = select_parameters(enc.params(), TrainMode::Head);
  std::set<std::string> seen;
  for (const auto* group : {&norm, &adapter, &head}) {
    for (const auto& n : *group) EXPECT_TRUE(seen.insert(n).second) << n;
  }
  for (const auto& n : enc.params().names_in(ParamGroup::Backbone)) EXPECT_TRUE(seen.insert(n).second);
  EXPECT_EQ(seen.size(), enc.params().size());
  EXPECT_EQ(all.size() + head.size(), enc.params().size());
  EXPECT_EQ(head, (std::vector<std::string>{"head.weight", "head.bias"}));
  EXPECT_THROW(train_mode_from_string("bogus"), std::invalid_argument);
}

TEST(SelectParameters, NormModeGradientsReachOnlyNorms) {
  VitEncoder enc(tiny_encoder_config(), 19);
  jitter_all(enc.params(), 20);
  const auto norm = select_parameters(enc.params(), TrainMode::Norm);
  ag::Tape tape;
  ParamBinding bind(tape, enc.params(), norm);
  auto z = enc.forward(bind, random_batch(2, 8, 21));
  tape.backward(ag::sum(ag::mul(z, z)));
  const GradientMap g = bind.gradients();
  EXPECT_EQ(g.size(), norm.size());
  for (const auto& [name, t] : g) {
    double mag = 0.0;
    for (double v : t.data()) mag += std::abs(v);
    EXPECT_GT(mag, 0.0) << name;
  }
  for (const auto& e : enc.params().entries()) {
    if (e.group != ParamGroup::Norm) EXPECT_FALSE(bind(e.name).requires_grad()) << e.name;
  }
}

TEST(Snapshot, RestoreIsExactAndIdempotent) {
  VitEncoder enc(tiny_encoder_config(), 22);
  jitter_all(enc.params(), 23);
  const Tensor x = random_batch(3, 8, 24);
  const Tensor z0 = enc.encode(x);
  const ModelCheckpoint ckpt = snapshot(enc.params());
  jitter_all(enc.params(), 25);
  EXPECT_FALSE(matches_bitwise(enc.params(), ckpt));
  restore(enc.params(), ckpt);
  EXPECT_TRUE(matches_bitwise(enc.params(), ckpt));
  restore(enc.params(), ckpt);
  EXPECT_TRUE(matches_bitwise(enc.params(), ckpt));
  EXPECT_TRUE(bitwise_equal(enc.encode(x), z0));
}

TEST(Snapshot, SchemaMismatchIsRejected) {
  VitEncoder a(tiny_encoder_config(), 0);
  EncoderConfig deeper = tiny_encoder_config();
  deeper.depth = 3;
  VitEncoder b(deeper, 0);
  EXPECT_THROW(restore(b.params(), snapshot(a.params())), SchemaError);
  VitEncoder c(tiny_encoder_config(), 0);
  attach_head(c, 2);
  EXPECT_THROW(restore(c.params(), snapshot(a.params())), SchemaError);
}

TEST(CheckpointFile, RoundTripIsExact) {
  VitEncoder enc(tiny_encoder_config(), 26);
  jitter_all(enc.params(), 27);
  PrototypeBank bank(8);
  std::mt19937_64 rng(28);
  bank.extend({{3, {random_tensor(Shape{8}, rng), 5}}, {7, {random_tensor(Shape{8}, rng), 2}}});
  const std::string path = temp_path("ckpt_roundtrip");
  save_checkpoint(path, snapshot(enc.params()), &bank);
  const CheckpointFile f = load_checkpoint(path);
  EXPECT_TRUE(matches_bitwise(enc.params(), f.params));
  ASSERT_TRUE(f.bank.has_value());
  EXPECT_EQ(f.bank->classes(), (std::vector<ClassId>{3, 7}));
  for (const auto& [k, p] : bank.prototypes()) {
    EXPECT_TRUE(bitwise_equal(p.mean, f.bank->prototypes().at(k).mean));
    EXPECT_EQ(p.count, f.bank->prototypes().at(k).count);
  }
  save_checkpoint(path, snapshot(enc.params()));
  EXPECT_FALSE(load_checkpoint(path).bank.has_value());
  std::filesystem::remove(path);
}

TEST(CheckpointFile, CorruptFilesAreRejected) {
  VitEncoder enc(tiny_encoder_config(), 0);
  const std::string path = temp_path("ckpt_corrupt");
  save_checkpoint(path, snapshot(enc.params()));
  const auto size = std::filesystem::file_size(path);
  std::filesystem::resize_file(path, size - 3);
  EXPECT_THROW(load_checkpoint(path), CheckpointFormatError);
  {
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    out << "NOTACKPT and more";
  }
  EXPECT_THROW(load_checkpoint(path), CheckpointFormatError);
  std::filesystem::remove(path);
  EXPECT_THROW(load_checkpoint(path), std::runtime_error);
}
