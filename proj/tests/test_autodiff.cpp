/*
 * Copyright 2026 ntklab contributors
 *
 * Licensed under the Apache License, Version 2.0 (the "License");
 * you may not use this file except in compliance with the License.
 * You may obtain a copy of the License at
 *
 *     http://www.apache.org/licenses/LICENSE-2.0
 *
 * Unless required by applicable law or agreed to in writing, software
 * distributed under the License is distributed on an "AS IS" BASIS,
 * WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or implied.
 * See the License for the specific language governing permissions and
 * limitations under the License.
 */
#include <doctest.h>

#include "support.hpp"

using namespace ntklab;
using namespace ntklab::testing;

namespace {

ModelSpec linear_1d(int in_features, bool bias = true) {
  ModelSpec spec;
  spec.name = "linear_1d";
  spec.in_ch = 1;
  spec.in_h = 1;
  spec.in_w = in_features;
  spec.n_out = 1;
  spec.layers = {LayerSpec::flatten(), LayerSpec::linear(1, bias)};
  return spec;
}

ModelSpec mlp_spec(int in_features, int hidden, int n_out) {
  ModelSpec spec;
  spec.name = "mlp_test";
  spec.in_ch = 1;
  spec.in_h = 1;
  spec.in_w = in_features;
  spec.n_out = n_out;
  spec.layers = {LayerSpec::flatten(), LayerSpec::linear(hidden), LayerSpec::relu(), LayerSpec::linear(n_out)};
  return spec;
}

ModelSpec cnn_spec(int n_out, bool with_bn, bool tanh_act = false) {
  auto act = tanh_act ? LayerSpec::tanh() : LayerSpec::relu();
  ModelSpec spec;
  spec.name = "cnn_test";
  spec.in_ch = 3;
  spec.in_h = 6;
  spec.in_w = 6;
  spec.n_out = n_out;
  spec.layers = {LayerSpec::conv2d(4, 3, 2, 1)};
  if (with_bn) spec.layers.push_back(LayerSpec::batchnorm());
  spec.layers.push_back(act);
  spec.layers.push_back(LayerSpec::conv2d(6, 3, 1, 1));
  if (with_bn) spec.layers.push_back(LayerSpec::batchnorm());
  spec.layers.push_back(act);
  spec.layers.push_back(LayerSpec::global_avg_pool());
  spec.layers.push_back(LayerSpec::linear(n_out));
  return spec;
}

}  // namespace

TEST_SUITE_BEGIN("autodiff");

TEST_CASE("one-layer linear model computes the hand value") {
  auto state = build_model<double>(linear_1d(2), InitScheme{}, 1);
  state.params.block("L1.linear.weight")[0] = 1.0;
  state.params.block("L1.linear.weight")[1] = 2.0;
  Tensor<double> x({1, 1, 1, 2});
  x[0] = 3.0;
  x[1] = 4.0;
  const auto logits = forward_logits(state, x, Phase::Eval);
  CHECK(logits(0, 0) == doctest::Approx(11.0).epsilon(1e-15));
}

TEST_CASE("zero parameters give all-zero logits") {
  auto state = build_model<double>(mlp_spec(8, 5, 3), InitScheme{}, 7);
  state.params.data().setZero();
  Rng rng(3);
  const auto x = random_batch(rng, 4, 1, 1, 8);
  const auto logits = forward_logits(state, x, Phase::Eval);
  CHECK(logits.cwiseAbs().maxCoeff() == 0.0);
}

TEST_CASE("random two-layer MLP matches a scalar-loop reimplementation") {
  const int in_f = 12, hidden = 7, n_out = 4, n = 5;
  auto state = build_model<double>(mlp_spec(in_f, hidden, n_out), InitScheme{InitKind::Normal}, 42);
  Rng rng(11);
  const auto x = random_batch(rng, n, 1, 1, in_f);
  const auto logits = forward_logits(state, x, Phase::Eval);

  const auto w1 = state.params.block("L1.linear.weight");
  const auto b1 = state.params.block("L1.linear.bias");
  const auto w2 = state.params.block("L3.linear.weight");
  const auto b2 = state.params.block("L3.linear.bias");
  for (int j = 0; j < n; ++j) {
    std::vector<double> h(static_cast<std::size_t>(hidden));
    for (int u = 0; u < hidden; ++u) {
      double acc = b1[u];
      for (int i = 0; i < in_f; ++i) acc += w1[u * in_f + i] * x[j * in_f + i];
      h[static_cast<std::size_t>(u)] = acc > 0.0 ? acc : 0.0;
    }
    for (int o = 0; o < n_out; ++o) {
      double acc = b2[o];
      for (int u = 0; u < hidden; ++u) acc += w2[o * hidden + u] * h[static_cast<std::size_t>(u)];
      CHECK(std::abs(acc - logits(j, o)) < 1e-12);
    }
  }
}

TEST_CASE("grad_params hand examples") {
  auto state = build_model<double>(linear_1d(1, /*bias=*/false), InitScheme{}, 1);
  state.params.block("L1.linear.weight")[0] = 1.0;
  Tensor<double> x({1, 1, 1, 1});
  x[0] = 2.0;
  MatRMd target(1, 1);
  target(0, 0) = 0.0;
  auto [loss, g] = grad_params(state, x, LossSpec<double>::mse(target), Phase::Eval);
  CHECK(loss == doctest::Approx(4.0));
  CHECK(g.data()[0] == doctest::Approx(8.0).epsilon(1e-15));  // 2*(2-0)*2

  // mse with y = f(x): loss gradient is exactly zero.
  MatRMd exact = forward_logits(state, x, Phase::Eval);
  auto [loss0, g0] = grad_params(state, x, LossSpec<double>::mse(exact), Phase::Eval);
  CHECK(loss0 == 0.0);
  CHECK(g0.data().cwiseAbs().maxCoeff() == 0.0);
}

TEST_CASE("grad_input hand examples") {
  auto state = build_model<double>(linear_1d(1, false), InitScheme{}, 1);
  state.params.block("L1.linear.weight")[0] = 3.0;
  Tensor<double> x({1, 1, 1, 1});
  x[0] = 1.0;
  MatRMd target(1, 1);
  target.setZero();
  auto [loss, gx] = grad_input(state, x, LossSpec<double>::mse(target), Phase::Eval);
  CHECK(loss == doctest::Approx(9.0));
  CHECK(gx[0] == doctest::Approx(18.0).epsilon(1e-15));  // 2*3*3*1

  // Zero the weights into x: constant model, zero input gradient.
  state.params.block("L1.linear.weight")[0] = 0.0;
  auto [loss2, gx2] = grad_input(state, x, LossSpec<double>::ce({0}), Phase::Eval);
  (void)loss2;
  CHECK(gx2[0] == 0.0);
}

TEST_CASE("MLP parameter gradients match central finite differences") {
  Rng rng(2026);
  int accepted = 0;
  while (accepted < 12) {
    const int in_f = 4 + static_cast<int>(rng.uniform_int(0, 6));
    const int hidden = 3 + static_cast<int>(rng.uniform_int(0, 5));
    const int n_out = 2 + static_cast<int>(rng.uniform_int(0, 3));
    const int n = 1 + static_cast<int>(rng.uniform_int(0, 4));
    auto state = build_model<double>(mlp_spec(in_f, hidden, n_out), InitScheme{InitKind::Normal},
                                     rng.next_u64());
    const auto x = random_batch(rng, n, 1, 1, in_f);
    if (min_relu_margin(state, x, Phase::Eval) < 1e-3) continue;  // FD invalid across a kink
    const bool use_ce = rng.bernoulli(0.5);
    LossSpec<double> loss = use_ce ? LossSpec<double>::ce(random_labels(rng, n, n_out))
                                   : LossSpec<double>::mse(MatRMd::Random(n, n_out));
    auto [lv, g] = grad_params(state, x, loss, Phase::Eval);
    (void)lv;
    const Vecd fd = fd_grad_params(state, x, loss, Phase::Eval);
    CHECK(rel_error(g.data(), fd) < 1e-6);
    ++accepted;
  }
}

TEST_CASE("CNN with batchnorm: parameter and input gradients match finite differences in both phases") {
  Rng rng(77);
  for (const Phase phase : {Phase::Train, Phase::Eval}) {
    int accepted = 0;
    while (accepted < 4) {
      auto state = build_model<double>(cnn_spec(3, true), InitScheme{InitKind::Normal}, rng.next_u64());
      // Non-trivial buffers so the Eval path is not the identity affine map.
      for (auto& b : state.bn) {
        for (Eigen::Index i = 0; i < b.running_mean.size(); ++i) {
          b.running_mean[i] = rng.uniform(-0.2, 0.2);
          b.running_var[i] = rng.uniform(0.5, 1.5);
        }
      }
      const int n = 3;
      const auto x = random_batch(rng, n, 3, 6, 6);
      if (min_relu_margin(state, x, phase) < 1e-3) continue;
      LossSpec<double> loss = LossSpec<double>::ce(random_labels(rng, n, 3));

      auto [lv, g] = grad_params(state, x, loss, phase);
      (void)lv;
      const Vecd fd = fd_grad_params(state, x, loss, phase);
      CHECK(rel_error(g.data(), fd) < 1e-6);

      auto [lv2, gx] = grad_input(state, x, loss, phase);
      (void)lv2;
      std::vector<Eigen::Index> coords;
      for (int k = 0; k < 20; ++k) coords.push_back(rng.uniform_int(0, x.size() - 1));
      const Vecd fdx = fd_grad_input_coords(state, x, loss, phase, coords);
      Vecd ax(static_cast<Eigen::Index>(coords.size()));
      for (std::size_t k = 0; k < coords.size(); ++k) ax[static_cast<Eigen::Index>(k)] = gx[coords[k]];
      CHECK(rel_error(ax, fdx) < 1e-5);
      ++accepted;
    }
  }
}

TEST_CASE("tanh CNN without BN: input gradients match finite differences (no kink filter needed)") {
  Rng rng(99);
  auto state = build_model<double>(cnn_spec(3, false, /*tanh=*/true), InitScheme{InitKind::Uniform}, 5);
  const auto x = random_batch(rng, 2, 3, 6, 6);
  LossSpec<double> loss = LossSpec<double>::ce({1, 2});
  auto [lv, gx] = grad_input(state, x, loss, Phase::Eval);
  (void)lv;
  std::vector<Eigen::Index> coords;
  for (int k = 0; k < 20; ++k) coords.push_back(rng.uniform_int(0, x.size() - 1));
  const Vecd fdx = fd_grad_input_coords(state, x, loss, Phase::Eval, coords);
  Vecd ax(static_cast<Eigen::Index>(coords.size()));
  for (std::size_t k = 0; k < coords.size(); ++k) ax[static_cast<Eigen::Index>(k)] = gx[coords[k]];
  CHECK(rel_error(ax, fdx) < 1e-5);
}

TEST_CASE("jacobian of a linear map embeds the input at the class row") {
  // f(x) = W x, n_out = 2: row for class i is x at W's row-i slots, zero elsewhere.
  ModelSpec spec;
  spec.name = "linear_map";
  spec.in_ch = 1;
  spec.in_h = 1;
  spec.in_w = 3;
  spec.n_out = 2;
  spec.layers = {LayerSpec::flatten(), LayerSpec::linear(2, /*bias=*/false)};
  auto state = build_model<double>(spec, InitScheme{InitKind::Normal}, 4);
  Tensor<double> x({1, 1, 1, 3});
  x[0] = 0.5;
  x[1] = -1.5;
  x[2] = 2.0;
  const auto jac = per_sample_param_jacobian(state, x, 1);
  REQUIRE(jac.rows() == 1);
  REQUIRE(jac.cols() == 6);
  for (int i = 0; i < 3; ++i) {
    CHECK(jac(0, i) == 0.0);           // class-0 weight slots
    CHECK(jac(0, 3 + i) == x[i]);      // class-1 weight slots hold x
  }
}

TEST_CASE("jacobian rows: identical samples, per-sample oracle, permutation") {
  Rng rng(15);
  auto state = build_model<double>(mlp_spec(6, 5, 3), InitScheme{InitKind::Normal}, 21);

  // Two identical samples produce two identical rows.
  Tensor<double> x2({2, 1, 1, 6});
  for (int i = 0; i < 6; ++i) x2[i] = x2[6 + i] = rng.uniform(0.0, 1.0);
  const auto j2 = per_sample_param_jacobian(state, x2, 0);
  CHECK((j2.row(0) - j2.row(1)).cwiseAbs().maxCoeff() == 0.0);

  // Row j equals the gradient of that sample's logit, obtained through the
  // batch-loss path: mse with target f(x) - e_i/2 has dL/df = e_i exactly.
  const int n = 4, cls = 2;
  const auto x = random_batch(rng, n, 1, 1, 6);
  const auto jac = per_sample_param_jacobian(state, x, cls);
  for (int j = 0; j < n; ++j) {
    Tensor<double> xj({1, 1, 1, 6});
    xj.data() = x.data().segment(j * 6, 6);
    MatRMd target = forward_logits(state, xj, Phase::Eval);
    target(0, cls) -= 0.5;  // dL/df = 2*(f-target)/1 = e_cls
    auto [lv, g] = grad_params(state, xj, LossSpec<double>::mse(target), Phase::Eval);
    (void)lv;
    CHECK(rel_error(jac.row(j).transpose(), g.data()) < 1e-12);
  }

  // Permuting X permutes rows identically (constant-stats model: bitwise).
  std::vector<int> perm = {2, 0, 3, 1};
  Tensor<double> xp({n, 1, 1, 6});
  for (int j = 0; j < n; ++j) xp.data().segment(j * 6, 6) = x.data().segment(perm[static_cast<std::size_t>(j)] * 6, 6);
  const auto jp = per_sample_param_jacobian(state, xp, cls);
  for (int j = 0; j < n; ++j) {
    CHECK((jp.row(j) - jac.row(perm[static_cast<std::size_t>(j)])).cwiseAbs().maxCoeff() == 0.0);
  }
}

TEST_CASE("jacobian respects the memory budget with a structured error") {
  auto state = build_model<double>(mlp_spec(6, 5, 3), InitScheme{InitKind::Normal}, 21);
  Rng rng(1);
  const auto x = random_batch(rng, 4, 1, 1, 6);
  CHECK_THROWS_AS(per_sample_param_jacobian<double>(state, x, 0, nullptr, /*budget_bytes=*/16),
                  MemoryBudgetError);
}

TEST_CASE("forward replay determinism is bitwise") {
  auto state = build_model<float>(cnn_spec(4, true), InitScheme{InitKind::Uniform}, 9);
  Rng rng(5);
  Tensor<float> x({5, 3, 6, 6});
  for (Eigen::Index i = 0; i < x.size(); ++i) x[i] = static_cast<float>(rng.uniform());
  const auto a = forward_logits(state, x, Phase::Eval);
  const auto b = forward_logits(state, x, Phase::Eval);
  CHECK((a - b).cwiseAbs().maxCoeff() == 0.0f);
}

TEST_CASE("param vector flatten/unflatten round trip is the identity") {
  const auto spec = cnn_spec(3, true);
  auto params = build_params<double>(spec, InitScheme{InitKind::Normal}, 123);
  // Rebuild from blocks and compare bitwise.
  auto rebuilt = ParamVector<double>::zeros(spec.param_layout());
  for (std::size_t e = 0; e < params.layout().size(); ++e) rebuilt.block(e) = params.block(e);
  CHECK((rebuilt.data() - params.data()).cwiseAbs().maxCoeff() == 0.0);
  // Layout covers [0, P) disjointly (constructor enforces; spot-check count).
  Eigen::Index total = 0;
  for (const auto& e : params.layout()) total += e.count();
  CHECK(total == params.size());
}

TEST_SUITE_END();
