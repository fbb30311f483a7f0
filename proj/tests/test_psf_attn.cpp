#include <gtest/gtest.h>

#include <filesystem>
#include <memory>

#include "oracles.hpp"
#include "sfact/psf_attn.hpp"

namespace sfact {
namespace {

PsfAttnConfig small_config(TaskKind task, std::size_t n, std::uint64_t seed) {
  PsfAttnConfig c;
  c.task = task;
  c.n = n;
  c.d = 4;
  c.hidden = 6;
  c.seed = seed;
  return c;
}

double batch_loss(const PsfAttnModel& model, const Dataset& ds, std::span<const std::size_t> idx) {
  return task_loss(model.config.task, forward_batch(model, ds, idx, nullptr), ds, idx, nullptr);
}

// Worst relative error between backprop and central differences over every parameter.
double composite_gradient_error(PsfAttnModel model, const Dataset& ds) {
  const std::vector<std::size_t> idx{0, 1};
  const auto [loss, grads] = loss_and_gradients(model, ds, idx);
  EXPECT_DOUBLE_EQ(loss, batch_loss(model, ds, idx));
  auto blocks = parameter_blocks(model);
  double worst = 0.0;
  for (std::size_t b = 0; b < blocks.size(); ++b) {
    for (std::size_t k = 0; k < blocks[b].size(); ++k) {
      const double numeric =
          oracle::central_difference([&] { return batch_loss(model, ds, idx); }, blocks[b][k], 1e-5);
      const double analytic = grads[b][k];
      if (std::abs(analytic) > 1e-8 || std::abs(numeric) > 1e-8) {
        worst = std::max(worst, oracle::relative_error(analytic, numeric));
      }
    }
  }
  return worst;
}

TEST(Model, ShapesFollowConfig) {
  auto cfg = small_config(TaskKind::temporal_order, 16, 1);
  const auto model = make_model(cfg);
  EXPECT_EQ(model.m(), 4u);
  EXPECT_EQ(model.factor_mlps[0].widths, (std::vector<std::size_t>{4, 6, 5}));
  EXPECT_EQ(model.head.output_width(), 4u);
  EXPECT_EQ(model.token_table.rows(), kOrderVocab);
  EXPECT_EQ(model.positional.rows(), 16u);

  cfg.task = TaskKind::adding;
  cfg.mode = PatternMode::paper_literal;
  cfg.m_factors = 2;
  cfg.d_v = 3;
  const auto adding = make_model(cfg);
  EXPECT_EQ(adding.m(), 2u);
  EXPECT_EQ(adding.factor_mlps[0].output_width(), 4u);
  EXPECT_EQ(adding.d_v(), 3u);
  EXPECT_EQ(adding.head.output_width(), 1u);
  EXPECT_EQ(adding.lift.widths, (std::vector<std::size_t>{2, 4}));
}

TEST(BuildFactors, ConstantDiagonalOutputGivesIdentity) {
  auto model = make_model(small_config(TaskKind::temporal_order, 16, 2));
  set_identity_factors(model);
  const auto ds = make_dataset(TaskKind::temporal_order, 16, 1, 3);
  const auto chain = build_factors(encode(model, ds, 0), model);
  EXPECT_EQ(chain_materialize(chain), DenseMatrix::identity(16));
}

TEST(BuildFactors, ZeroOutputGivesZeroChain) {
  auto model = make_model(small_config(TaskKind::temporal_order, 8, 2));
  for (auto& f : model.factor_mlps) {
    f.weight(f.layers() - 1).setZero();
    f.bias(f.layers() - 1).setZero();
  }
  const auto ds = make_dataset(TaskKind::temporal_order, 8, 1, 3);
  EXPECT_EQ(chain_materialize(build_factors(encode(model, ds, 0), model)), DenseMatrix(8, 8));
}

TEST(BuildFactors, SlotMapPlacesDiagonalThenOffsets) {
  const auto model = make_model(small_config(TaskKind::temporal_order, 8, 4));
  const auto ds = make_dataset(TaskKind::temporal_order, 8, 1, 5);
  const auto e = encode(model, ds, 0);
  const auto chain = build_factors(e, model);
  for (std::size_t m = 0; m < model.m(); ++m) {
    const auto out = mlp_forward(model.factor_mlps[m], e);
    DenseMatrix expect(8, 8);
    for (std::size_t i = 0; i < 8; ++i) {
      expect(i, i) = out(i, 0);
      std::size_t offset = 1;
      for (std::size_t s = 1; s < out.cols(); ++s, offset *= 2) expect(i, (i + offset) % 8) = out(i, s);
    }
    EXPECT_EQ(chain[m].densify(), expect) << "factor " << m;
  }
}

TEST(Forward, IdentityFactorsPassValuesThrough) {
  auto model = make_model(small_config(TaskKind::adding, 16, 6));
  set_identity_factors(model);
  const auto ds = make_dataset(TaskKind::adding, 16, 2, 7);
  const auto t = forward(model, ds, 1);
  EXPECT_EQ(t.e_new, t.v);
}

TEST(Forward, MatchesMaterializedChainTimesValues) {
  const auto model = make_model(small_config(TaskKind::temporal_order, 8, 8));
  const auto ds = make_dataset(TaskKind::temporal_order, 8, 3, 9);
  const auto t = forward(model, ds, 2);
  const auto expect = oracle::multiply(oracle::to_grid(chain_materialize(t.chain)), oracle::to_grid(t.v));
  for (std::size_t i = 0; i < 8; ++i)
    for (std::size_t c = 0; c < t.v.cols(); ++c) EXPECT_NEAR(t.e_new(i, c), expect[i][c], 1e-10);
}

TEST(Forward, ZeroValuesGiveHeadBias) {
  auto model = make_model(small_config(TaskKind::temporal_order, 8, 10));
  std::fill(model.value_mlp.params.begin(), model.value_mlp.params.end(), 0.0);
  for (std::size_t c = 0; c < 4; ++c) model.head.bias(0)(static_cast<Eigen::Index>(c)) = 0.1 * static_cast<double>(c);
  const auto ds = make_dataset(TaskKind::temporal_order, 8, 1, 11);
  const auto t = forward(model, ds, 0);
  EXPECT_EQ(t.output, (std::vector<double>{0.0, 0.1, 0.2, 0.30000000000000004}));
}

TEST(Forward, BatchedPathMatchesSingleSequence) {
  auto cfg = small_config(TaskKind::adding, 8, 12);
  cfg.residual = true;
  const auto model = make_model(cfg);
  const auto ds = make_dataset(TaskKind::adding, 8, 3, 13);
  const std::vector<std::size_t> idx{2, 0, 1};
  const auto out = forward_batch(model, ds, idx, nullptr);
  for (std::size_t b = 0; b < 3; ++b) {
    EXPECT_NEAR(out(b, 0), forward(model, ds, idx[b]).output[0], 1e-12);
  }
}

TEST(Forward, RejectsMismatchedData) {
  const auto model = make_model(small_config(TaskKind::adding, 8, 1));
  EXPECT_THROW(forward(model, make_dataset(TaskKind::adding, 9, 1, 1), 0), LengthMismatch);
  EXPECT_THROW(forward(model, make_dataset(TaskKind::temporal_order, 8, 1, 1), 0), InvalidInput);
}

TEST(AttentionRow, IdentityModelGivesUnitVector) {
  auto model = make_model(small_config(TaskKind::temporal_order, 16, 14));
  set_identity_factors(model);
  const auto e = encode(model, make_dataset(TaskKind::temporal_order, 16, 1, 1), 0);
  const auto row = attention_row(model, e, 5);
  for (std::size_t j = 0; j < 16; ++j) EXPECT_EQ(row[j], j == 5 ? 1.0 : 0.0);
}

TEST(AttentionRow, MatchesMaterializedRows) {
  const auto model = make_model(small_config(TaskKind::adding, 16, 15));
  const auto e = encode(model, make_dataset(TaskKind::adding, 16, 1, 2), 0);
  const auto x = chain_materialize(build_factors(e, model));
  for (std::size_t i = 0; i < 16; ++i) EXPECT_LE(max_abs_diff(attention_row(model, e, i), x.row(i)), 1e-10);
  EXPECT_THROW(attention_row(model, e, 16), InvalidDimension);
}

TEST(AttentionRow, SingleZeroFactorGivesZeroRow) {
  auto cfg = small_config(TaskKind::adding, 8, 16);
  cfg.m_factors = 1;
  auto model = make_model(cfg);
  auto& f = model.factor_mlps[0];
  f.weight(f.layers() - 1).setZero();
  f.bias(f.layers() - 1).setZero();
  const auto e = encode(model, make_dataset(TaskKind::adding, 8, 1, 2), 0);
  for (double v : attention_row(model, e, 3)) EXPECT_EQ(v, 0.0);
}

class CompositeGradient : public ::testing::TestWithParam<std::tuple<TaskKind, bool>> {};

TEST_P(CompositeGradient, MatchesFiniteDifferences) {
  const auto [task, residual] = GetParam();
  auto cfg = small_config(task, 8, 17);
  cfg.m_factors = 3;
  cfg.residual = residual;
  const auto model = make_model(cfg);
  const auto ds = make_dataset(task, 8, 2, 18);
  EXPECT_LE(composite_gradient_error(model, ds), 1e-4);
}

INSTANTIATE_TEST_SUITE_P(Tasks, CompositeGradient,
                         ::testing::Combine(::testing::Values(TaskKind::adding, TaskKind::temporal_order),
                                            ::testing::Bool()));

TEST(TaskLoss, CrossEntropyAndSquaredError) {
  Dataset ds = make_dataset(TaskKind::temporal_order, 4, 1, 1);
  ds.order[0].label = 2;
  DenseMatrix out(1, 4, {0.0, 0.0, 0.0, 0.0});
  const std::vector<std::size_t> idx{0};
  EXPECT_NEAR(task_loss(TaskKind::temporal_order, out, ds, idx, nullptr), std::log(4.0), 1e-15);

  Dataset add = make_dataset(TaskKind::adding, 4, 1, 1);
  DenseMatrix y(1, 1, add.adding[0].y + 0.3);
  EXPECT_NEAR(task_loss(TaskKind::adding, y, add, idx, nullptr), 0.09, 1e-12);
}

TEST(Evaluate, PerfectPredictorScoresOne) {
  const auto ds = make_dataset(TaskKind::temporal_order, 32, 200, 3);
  const double acc = evaluate_predictor(ds, [&](std::size_t i) {
    std::vector<double> out(4, 0.0);
    out[static_cast<std::size_t>(ds.order[i].label)] = 1.0;
    return out;
  });
  EXPECT_EQ(acc, 1.0);
}

TEST(Evaluate, ConstantHalfOnAddingMatchesEmpiricalRate) {
  const auto ds = make_dataset(TaskKind::adding, 16, 100000, 4);
  std::size_t inside = 0;
  for (const auto& inst : ds.adding) inside += std::abs(inst.y - 0.5) < 0.04 ? 1 : 0;
  const double acc = evaluate_predictor(ds, [](std::size_t) { return std::vector<double>{0.5}; });
  EXPECT_DOUBLE_EQ(acc, static_cast<double>(inside) / 1e5);
  // y - 0.5 is a quarter of a triangular sum on (-2, 2); P(|s| < 0.16) = 0.16 - 0.0064
  EXPECT_NEAR(acc, 0.1536, 0.005);
}

TEST(Evaluate, ToleranceIsStrict) {
  Dataset ds = make_dataset(TaskKind::adding, 4, 1, 5);
  ds.adding[0].y = 0.5;
  EXPECT_FALSE(prediction_correct(TaskKind::adding, std::vector<double>{0.5 + 0.04}, ds, 0));
  EXPECT_TRUE(prediction_correct(TaskKind::adding, std::vector<double>{0.5 + 0.0399}, ds, 0));
}

TEST(Train, LearnsShortTemporalOrder) {
  auto cfg = small_config(TaskKind::temporal_order, 16, 19);
  cfg.d = 16;
  cfg.hidden = 32;
  const auto train_set = make_dataset(TaskKind::temporal_order, 16, 4000, 20);
  const auto test_set = make_dataset(TaskKind::temporal_order, 16, 500, 21);
  TrainConfig tc;
  tc.epochs = 8;
  tc.seed = 22;
  tc.stop_at_accuracy = 0.95;
  const auto result = train(make_model(cfg), train_set, test_set, tc);
  ASSERT_FALSE(result.metrics.empty());
  EXPECT_GE(result.metrics.back().eval_accuracy, 0.95);
  EXPECT_EQ(evaluate(result.model, test_set), result.metrics.back().eval_accuracy);
}

TEST(Train, DeterministicMetrics) {
  const auto cfg = small_config(TaskKind::adding, 8, 23);
  const auto train_set = make_dataset(TaskKind::adding, 8, 200, 24);
  const auto test_set = make_dataset(TaskKind::adding, 8, 50, 25);
  TrainConfig tc;
  tc.epochs = 2;
  tc.seed = 26;
  const auto a = train(make_model(cfg), train_set, test_set, tc);
  const auto b = train(make_model(cfg), train_set, test_set, tc);
  ASSERT_EQ(a.metrics.size(), b.metrics.size());
  for (std::size_t k = 0; k < a.metrics.size(); ++k) {
    EXPECT_EQ(a.metrics[k].train_loss, b.metrics[k].train_loss);
    EXPECT_EQ(a.metrics[k].eval_accuracy, b.metrics[k].eval_accuracy);
  }
  EXPECT_EQ(a.model.head.params, b.model.head.params);
}

TEST(Train, IdenticalWhenHeapLayoutShifts) {
  for (auto task : {TaskKind::temporal_order, TaskKind::adding}) {
    PsfAttnConfig cfg;
    cfg.task = task;
    cfg.n = 16;
    cfg.seed = 51;
    const auto train_set = make_dataset(task, 16, 600, 52);
    const auto test_set = make_dataset(task, 16, 100, 53);
    TrainConfig tc;
    tc.epochs = 1;
    tc.seed = 54;
    std::vector<std::unique_ptr<char[]>> shifts;
    const auto reference = train(make_model(cfg), train_set, test_set, tc);
    for (std::size_t bytes = 8; bytes <= 32; bytes += 8) {
      shifts.emplace_back(new char[bytes]);
      const auto again = train(make_model(cfg), train_set, test_set, tc);
      EXPECT_EQ(again.metrics.back().train_loss, reference.metrics.back().train_loss) << to_string(task);
      EXPECT_EQ(again.model.head.params, reference.model.head.params) << to_string(task);
    }
  }
}

TEST(Train, LrDecayScalesLaterEpochs) {
  const auto cfg = small_config(TaskKind::adding, 8, 41);
  const auto train_set = make_dataset(TaskKind::adding, 8, 120, 42);
  const Dataset no_eval{TaskKind::adding, 8, {}, {}};
  TrainConfig one;
  one.epochs = 1;
  one.seed = 43;
  TrainConfig frozen = one;
  frozen.epochs = 2;
  frozen.lr_decay = 1e-12;
  const auto a = train(make_model(cfg), train_set, no_eval, one);
  const auto b = train(make_model(cfg), train_set, no_eval, frozen);
  ASSERT_EQ(a.model.head.params.size(), b.model.head.params.size());
  for (std::size_t k = 0; k < a.model.head.params.size(); ++k) {
    EXPECT_NEAR(a.model.head.params[k], b.model.head.params[k], 1e-12);
  }
  TrainConfig constant = frozen;
  constant.lr_decay = 1.0;
  EXPECT_NE(a.model.head.params, train(make_model(cfg), train_set, no_eval, constant).model.head.params);
}

TEST(Train, RejectsNonPositiveLrDecay) {
  const auto cfg = small_config(TaskKind::adding, 8, 44);
  const auto train_set = make_dataset(TaskKind::adding, 8, 10, 45);
  TrainConfig tc;
  tc.lr_decay = 0.0;
  EXPECT_THROW(train(make_model(cfg), train_set, train_set, tc), InvalidInput);
}

TEST(Train, NonFiniteLossCarriesLastGoodModel) {
  const auto cfg = small_config(TaskKind::adding, 8, 27);
  auto train_set = make_dataset(TaskKind::adding, 8, 100, 28);
  train_set.adding[57].y = std::numeric_limits<double>::infinity();
  TrainConfig tc;
  tc.epochs = 1;
  tc.batch_size = 10;
  try {
    train(make_model(cfg), train_set, Dataset{TaskKind::adding, 8, {}, {}}, tc);
    FAIL() << "expected a numeric fault";
  } catch (const PsfNumericFault& e) {
    for (auto block : parameter_blocks(const_cast<PsfAttnModel&>(e.last_good()))) {
      for (double v : block) ASSERT_TRUE(std::isfinite(v));
    }
  }
}

TEST(Checkpoint, RoundTripPreservesOutputs) {
  for (auto task : {TaskKind::adding, TaskKind::temporal_order}) {
    auto cfg = small_config(task, 8, 29);
    cfg.activation = Activation::relu;
    cfg.residual = true;
    const auto model = make_model(cfg);
    const auto dir = std::filesystem::temp_directory_path() / "sfact_psf_ckpt";
    std::filesystem::remove_all(dir);
    save_model(model, dir);
    const auto back = load_model(dir);
    EXPECT_EQ(to_json(back.config), to_json(model.config));
    const auto ds = make_dataset(task, 8, 2, 30);
    EXPECT_EQ(forward(back, ds, 1).output, forward(model, ds, 1).output);
    std::filesystem::remove_all(dir);
  }
}

}  // namespace
}  // namespace sfact
