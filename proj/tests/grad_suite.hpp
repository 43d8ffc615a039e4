#pragma once

// Finite-difference gradient suites shared by the unit tests and the
// acceptance run. Op checks work on either build; whole-loss checks are
// meant for the double build (see gradcheck.hpp).

#include <cmath>
#include <string>
#include <vector>

#include "gradcheck.hpp"
#include "rmmnav/training.hpp"

namespace gradsuite {

struct Outcome {
  std::string name;
  int checked = 0;
  double max_err = 0.0;
  double tol = 0.0;
  bool ok() const { return checked >= 50 && max_err <= tol; }
};

namespace detail {

using namespace rmmnav;

constexpr double kFloor = 1e-6;  // denominator floor for near-zero gradients

inline gradcheck::Shapes same_shape(int n) {
  return [n](Rng& rng) {
    const int r = 1 + static_cast<int>(rng.below(8)), c = 1 + static_cast<int>(rng.below(8));
    return std::vector<std::pair<int, int>>(n, {r, c});
  };
}

inline Scalar away_from_zero(Rng& rng) {
  const double x = rng.uniform(0.05, 2.0);
  return static_cast<Scalar>(rng.below(2) ? x : -x);
}

inline ModelConfig small() {
  ModelConfig c;
  c.hidden = 8;
  c.word_embed = 6;
  c.action_embed = 4;
  c.d_img = 8;
  c.dropout = 0.0f;
  return c;
}

// A fixed trajectory and context: the losses are smooth functions of the parameters.
struct Fixture {
  World world = generate_world(42, WorldParams{});
  std::vector<TokenId> context;
  Pose start{};
  std::vector<Action> actions;
  NodeId goal = 0;

  explicit Fixture(const Models& m) {
    goal = world.goal_node();
    context = {target_token(world), Vocabulary::kNavTag, 20, 21, 22, Vocabulary::kOraTag, 8, 30};
    start = Pose{world.num_nodes() - 1, 2};
    Rng rng(3);
    const auto ctx = encode_context(m, context);
    actions = decode_actions(m, ctx, world, start, kStartAction, {DecodeKind::Sample, &rng}, 6).actions;
    if (actions.empty() || actions.back() == Action::Stop) actions = {Action::Left, Action::Forward, Action::Right};
  }

  RolloutRecord record(const Models& m) const {
    const auto ctx = encode_context(m, context);
    const std::vector<Rollout> r{replay_actions(m, ctx, world, start, kStartAction, actions)};
    return make_record(world, goal, r);
  }
};

// Random coordinates across the navigator and critic parameters.
inline std::vector<std::pair<std::string, int>> sample_coords(const Models& m, int count, std::uint64_t seed,
                                                       const std::vector<std::string>& prefixes) {
  std::vector<std::string> names;
  for (const auto& p : prefixes) {
    for (const auto& n : m.params.names(p)) names.push_back(n);
  }
  Rng rng(seed);
  std::vector<std::pair<std::string, int>> out;
  while (static_cast<int>(out.size()) < count) {
    const auto& n = names[rng.below(names.size())];
    out.emplace_back(n, static_cast<int>(rng.below(m.params.get(n).size())));
  }
  return out;
}

// Compares analytic gradients (already in `m`) to central differences of
// `loss` at each coordinate.
inline gradcheck::Result compare(Models& m, const std::vector<std::pair<std::string, int>>& coords,
                  const std::function<double()>& loss, double h) {
  gradcheck::Result out;
  for (const auto& [name, idx] : coords) {
    Tensor& t = m.params.entry(name).value;
    const double analytic = t.grad()[idx];
    const double numeric = gradcheck::fd_central(loss, t.mutable_data()[idx], h);
    out.max_err = std::max(out.max_err, gradcheck::rel_err(analytic, numeric, kFloor));
    ++out.checked;
  }
  return out;
}

}  // namespace detail

using namespace detail;

/// Every differentiable op against its double-precision oracle.
inline std::vector<Outcome> op_checks() {
  using namespace rmmnav;
  using gradcheck::check_op;
  using gradcheck::DMat;
  std::vector<Outcome> out;
  // Elementwise ops.
  auto run = [&](const char* name, int arity, gradcheck::TensorFn op, gradcheck::DoubleFn oracle,
                 gradcheck::Sampler sample = nullptr) {
    const auto r = check_op(same_shape(arity), op, oracle, 11, 50, sample);
    out.push_back({name, r.checked, r.max_err, 1e-4});
  };
  run("add", 2, [](auto& x) { return add(x[0], x[1]); }, [](auto& x) { return gradcheck::d_add(x[0], x[1]); });
  run("sub", 2, [](auto& x) { return sub(x[0], x[1]); },
      [](auto& x) { return gradcheck::d_add(x[0], gradcheck::d_map(x[1], [](double v) { return -v; })); });
  run("mul", 2, [](auto& x) { return mul(x[0], x[1]); }, [](auto& x) {
    DMat o = x[0];
    for (std::size_t i = 0; i < o.v.size(); ++i) o.v[i] *= x[1].v[i];
    return o;
  });
  run("scale", 1, [](auto& x) { return scale(x[0], static_cast<Scalar>(-1.5)); },
      [](auto& x) { return gradcheck::d_map(x[0], [](double v) { return -1.5 * v; }); });
  run("add_scalar", 1, [](auto& x) { return add_scalar(x[0], static_cast<Scalar>(0.75)); },
      [](auto& x) { return gradcheck::d_map(x[0], [](double v) { return v + 0.75; }); });
  run("tanh", 1, [](auto& x) { return tanh(x[0]); },
      [](auto& x) { return gradcheck::d_map(x[0], [](double v) { return std::tanh(v); }); });
  run("sigmoid", 1, [](auto& x) { return sigmoid(x[0]); },
      [](auto& x) { return gradcheck::d_map(x[0], gradcheck::d_sigmoid); });
  run("relu", 1, [](auto& x) { return relu(x[0]); },
      [](auto& x) { return gradcheck::d_map(x[0], [](double v) { return v > 0 ? v : 0.0; }); }, away_from_zero);
  run("dropout", 1,
      [](auto& x) {
        Rng rng(77);
        return dropout(x[0], 0.3f, rng, true);
      },
      [](auto& x) {
        Rng rng(77);
        DMat o = x[0];
        for (auto& v : o.v) v *= rng.uniform() >= 0.3 ? 1.0 / (1.0 - static_cast<double>(0.3f)) : 0.0;
        return o;
      });

  // Structural ops.
  auto run_s = [&](const char* name, gradcheck::Shapes shapes, gradcheck::TensorFn op, gradcheck::DoubleFn oracle) {
    const auto r = check_op(shapes, op, oracle, 23);
    out.push_back({name, r.checked, r.max_err, 1e-3});
  };
  auto dim = [](Rng& rng) { return 1 + static_cast<int>(rng.below(8)); };
  run_s("matmul", [&](Rng& rng) {
        const int m = dim(rng), k = dim(rng), n = dim(rng);
        return std::vector<std::pair<int, int>>{{m, k}, {k, n}};
      },
      [](auto& x) { return matmul(x[0], x[1]); }, [](auto& x) { return gradcheck::d_matmul(x[0], x[1]); });
  run_s("matmul_nt", [&](Rng& rng) {
        const int m = dim(rng), k = dim(rng), n = dim(rng);
        return std::vector<std::pair<int, int>>{{m, k}, {n, k}};
      },
      [](auto& x) { return matmul_nt(x[0], x[1]); },
      [](auto& x) { return gradcheck::d_matmul(x[0], gradcheck::d_transpose(x[1])); });
  run_s("add broadcast", [&](Rng& rng) {
        const int m = dim(rng), n = dim(rng);
        return std::vector<std::pair<int, int>>{{m, n}, {1, n}};
      },
      [](auto& x) { return add(x[0], x[1]); }, [](auto& x) { return gradcheck::d_add(x[0], x[1]); });
  run_s("softmax", same_shape(1), [](auto& x) { return softmax(x[0]); },
      [](auto& x) { return gradcheck::d_softmax(x[0]); });
  run_s("log_softmax", same_shape(1), [](auto& x) { return log_softmax(x[0]); },
      [](auto& x) { return gradcheck::d_map(gradcheck::d_softmax(x[0]), [](double v) { return std::log(v); }); });
  run_s("embed", [&](Rng& rng) { return std::vector<std::pair<int, int>>{{5, dim(rng)}}; },
      [](auto& x) { return embed(x[0], 3); }, [](auto& x) { return gradcheck::d_slice(gradcheck::d_transpose(gradcheck::d_slice(gradcheck::d_transpose(x[0]), 3, 1)), 0, x[0].c); });
  run_s("concat", [&](Rng& rng) {
        const int m = dim(rng);
        return std::vector<std::pair<int, int>>{{m, dim(rng)}, {m, dim(rng)}, {m, dim(rng)}};
      },
      [](auto& x) { return concat(std::span<const Tensor>(x)); }, [](auto& x) { return gradcheck::d_concat(x); });
  run_s("slice_cols", [&](Rng&) { return std::vector<std::pair<int, int>>{{3, 7}}; },
      [](auto& x) { return slice_cols(x[0], 2, 4); }, [](auto& x) { return gradcheck::d_slice(x[0], 2, 4); });
  run_s("stack_rows", [&](Rng& rng) {
        const int n = dim(rng);
        return std::vector<std::pair<int, int>>{{1, n}, {1, n}, {1, n}};
      },
      [](auto& x) { return stack_rows(std::span<const Tensor>(x)); },
      [](auto& x) {
        DMat o{3, x[0].c, {}};
        for (const auto& r : x) o.v.insert(o.v.end(), r.v.begin(), r.v.end());
        return o;
      });
  run_s("sum", same_shape(1), [](auto& x) { return sum(x[0]); }, [](auto& x) {
    double s = 0;
    for (double v : x[0].v) s += v;
    return DMat{1, 1, {s}};
  });
  run_s("mean", same_shape(1), [](auto& x) { return mean(x[0]); }, [](auto& x) {
    double s = 0;
    for (double v : x[0].v) s += v;
    return DMat{1, 1, {s / x[0].v.size()}};
  });
  run_s("pick", [&](Rng&) { return std::vector<std::pair<int, int>>{{2, 3}}; }, [](auto& x) { return pick(x[0], 4); },
      [](auto& x) { return DMat{1, 1, {x[0].v[4]}}; });
  run_s("cross_entropy", [&](Rng& rng) { return std::vector<std::pair<int, int>>{{1, 2 + dim(rng)}}; },
      [](auto& x) { return cross_entropy(x[0], 1); },
      [](auto& x) { return DMat{1, 1, {-std::log(gradcheck::d_softmax(x[0]).v[1])}}; });
  run_s("attention", [&](Rng& rng) {
        const int d = dim(rng);
        return std::vector<std::pair<int, int>>{{1, d}, {dim(rng), d}};
      },
      [](auto& x) { return attention(x[0], x[1]).context; },
      [](auto& x) {
        const DMat w = gradcheck::d_softmax(gradcheck::d_matmul(x[0], gradcheck::d_transpose(x[1])));
        return gradcheck::d_matmul(w, x[1]);
      });
  run_s("lstm_cell", [&](Rng& rng) {
        const int in = dim(rng), H = dim(rng);
        return std::vector<std::pair<int, int>>{{1, in}, {1, H}, {1, H}, {in + H, 4 * H}, {1, 4 * H}};
      },
      [](auto& x) {
        const LstmWeights w{x[3], x[4], x[1].cols()};
        const auto s = lstm_cell(x[0], {x[1], x[2]}, w);
        return concat({s.h, s.c});
      },
      [](auto& x) {
        const auto [h, c] = gradcheck::d_lstm(x[0], x[1], x[2], x[3], x[4]);
        return gradcheck::d_concat({h, c});
      });
  return out;
}

/// Navigator cross-entropy loss.
inline Outcome ce_loss_check() {
  using namespace rmmnav;
  auto m = init_models(small(), 11);
  const Fixture f(m);
  Tape tape;
  {
    TapeScope scope(tape);
    const Tensor loss = ce_loss(f.record(m));
    tape.backward(loss);
  }
  auto loss_fn = [&]() {
    NoGradScope ng;
    return static_cast<double>(ce_loss(f.record(m)).item());
  };
  const auto coords = sample_coords(m, 60, 5, {"nav/"});
  const auto res = compare(m, coords, loss_fn, 1e-3);
  return {"cross-entropy loss", res.checked, res.max_err, 1e-3};
}

/// Actor-critic loss with k-step targets.
inline Outcome a2c_loss_check() {
  using namespace rmmnav;
  auto m = init_models(small(), 12);
  const Fixture f(m);
  const int k = 2;
  // The bootstrap and the actor's advantage are constants of the update;
  // hold them at their values for the unperturbed parameters.
  const auto base = f.record(m);
  const int T = static_cast<int>(base.steps.size());
  std::vector<double> targets(T);
  for (int t = 0; t < T; ++t) {
    double target = 0.0;
    for (int i = t; i < std::min(T, t + k); ++i) target += base.steps[i].reward;
    if (t + k < T) target += base.steps[t + k].value.item();
    targets[t] = target;
  }
  Tape tape;
  {
    TapeScope scope(tape);
    const auto terms = a2c_loss(f.record(m), k);
    tape.backward(terms.total);
  }
  auto loss_fn = [&]() {
    NoGradScope ng;
    const auto r = f.record(m);
    double total = 0.0;
    for (int t = 0; t < T; ++t) {
      const double v = r.steps[t].value.item();
      const double adv_fixed = targets[t] - base.steps[t].value.item();
      const auto lp = log_softmax(r.steps[t].logits);
      total += -adv_fixed * lp.at(0, static_cast<int>(r.steps[t].action));
      total += 0.5 * (targets[t] - v) * (targets[t] - v);
    }
    return total;
  };
  const auto coords = sample_coords(m, 60, 6, {"nav/", "critic/"});
  const auto res = compare(m, coords, loss_fn, 1e-3);
  return {"actor-critic loss", res.checked, res.max_err, 1e-3};
}

/// Both whole-loss checks.
inline std::vector<Outcome> loss_checks() { return {ce_loss_check(), a2c_loss_check()}; }

}  // namespace gradsuite
