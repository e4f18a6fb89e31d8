#pragma once

#include <algorithm>
#include <functional>
#include <numeric>
#include <string>
#include <vector>

#include "dualseg/loss.hpp"
#include "dualseg/model.hpp"

// Central finite-difference verification of the analytic gradients, always
// at double precision (float differences are too noisy at h=1e-5).
namespace dualseg::gradcheck {

struct CheckResult {
    std::string op;
    double max_rel_err = 0.0;
    double tol = 0.0;
    bool pass = true;
};

// Scalar-valued function of the inputs; must be deterministic and free of
// observable side effects across repeated calls.
using Fn = std::function<Tensor<double>(Tape<double>&, std::vector<Tensor<double>>&)>;

inline double rel_err(double a, double b, double atol = 1e-8) {
    const double diff = std::abs(a - b);
    if (diff < atol) return 0.0;  // absolute guard for near-zero gradients
    return diff / std::max(std::abs(a), std::abs(b));
}

// samples[i] selects which elements of inputs[i] get the finite-difference
// treatment; an empty selector means every element. corrupt scales the
// analytic gradients and exists for the negative-control fixture.
//
// No single h suits every probe of a deep composite: a large step straddles
// ReLU kinks (the quotient measures the wrong secant), while a small step
// drowns near-zero derivatives in forward-pass rounding noise (e.g. a conv
// bias feeding train-mode batchnorm has an exactly-zero gradient, and the
// quotient returns noise/2h). Each probe is therefore accepted if the
// quotient agrees with the analytic value at any h of the cascade; a wrong
// analytic gradient agrees at none, since the quotients approximate the
// true derivative everywhere.
inline double max_rel_error(const Fn& f, std::vector<Tensor<double>> inputs,
                            std::vector<double> hs = {1e-5}, double corrupt = 1.0,
                            const std::vector<std::vector<int64_t>>* samples = nullptr,
                            double atol = 1e-8, double accept_tol = 0.0) {
    for (auto& t : inputs) t.set_requires_grad(true);
    Tape<double> tape;
    Tensor<double> loss = f(tape, inputs);
    tape.backward(loss);
    std::vector<std::vector<double>> analytic;
    analytic.reserve(inputs.size());
    for (auto& t : inputs) {
        t.ensure_grad();
        analytic.emplace_back(t.grad(), t.grad() + t.numel());
    }

    auto eval = [&]() {
        Tape<double> off(false);
        return f(off, inputs).item();
    };

    double worst = 0.0;
    for (size_t i = 0; i < inputs.size(); ++i) {
        std::vector<int64_t> all;
        const std::vector<int64_t>* idxs = nullptr;
        if (samples) {
            idxs = &(*samples)[i];  // an empty selector skips the tensor
        } else {
            all.resize(static_cast<size_t>(inputs[i].numel()));
            std::iota(all.begin(), all.end(), 0);
            idxs = &all;
        }
        for (int64_t j : *idxs) {
            double* p = inputs[i].data() + j;
            const double orig = *p;
            double probe_err = -1.0;
            for (const double hk : hs) {
                *p = orig + hk;
                const double fp = eval();
                *p = orig - hk;
                const double fm = eval();
                *p = orig;
                const double fd = (fp - fm) / (2.0 * hk);
                const double e = rel_err(analytic[i][j] * corrupt, fd, atol);
                probe_err = probe_err < 0.0 ? e : std::min(probe_err, e);
                if (probe_err <= accept_tol) break;
            }
            worst = std::max(worst, probe_err);
        }
    }
    return worst;
}

namespace detail {

inline Tensor<double> rand_uniform(Rng& rng, Shape shape, double lo, double hi) {
    Tensor<double> t(std::move(shape));
    double* p = t.data();
    for (int64_t i = 0; i < t.numel(); ++i) p[i] = rng.uniform(lo, hi);
    return t;
}

inline Tensor<double> rand_binary(Rng& rng, Shape shape, double frac_ones = 0.5) {
    Tensor<double> t(std::move(shape));
    double* p = t.data();
    for (int64_t i = 0; i < t.numel(); ++i) p[i] = rng.uniform() < frac_ones ? 1.0 : 0.0;
    return t;
}

// Values kept pairwise distinct (gap well above 2h) so pooling argmaxes
// cannot flip under the probe.
inline Tensor<double> rand_distinct(Rng& rng, Shape shape) {
    Tensor<double> t(std::move(shape));
    const int64_t n = t.numel();
    std::vector<int64_t> perm(static_cast<size_t>(n));
    std::iota(perm.begin(), perm.end(), 0);
    for (int64_t i = n - 1; i > 0; --i)
        std::swap(perm[static_cast<size_t>(i)], perm[static_cast<size_t>(rng.uniform_int(i + 1))]);
    double* p = t.data();
    for (int64_t i = 0; i < n; ++i)
        p[i] = -1.0 + 2.0 * static_cast<double>(perm[static_cast<size_t>(i)]) / static_cast<double>(n);
    return t;
}

// Signed values bounded away from the ReLU kink.
inline Tensor<double> rand_off_kink(Rng& rng, Shape shape) {
    Tensor<double> t(std::move(shape));
    double* p = t.data();
    for (int64_t i = 0; i < t.numel(); ++i) {
        const double mag = rng.uniform(0.1, 1.1);
        p[i] = rng.uniform() < 0.5 ? -mag : mag;
    }
    return t;
}

// Fixed random projection to a scalar, so the whole output gradient is
// exercised rather than the all-ones direction only.
inline Fn project(std::function<Tensor<double>(Tape<double>&, std::vector<Tensor<double>>&)> op,
                  uint64_t proj_seed) {
    return [op, proj_seed](Tape<double>& tape, std::vector<Tensor<double>>& in) {
        Tensor<double> out = op(tape, in);
        Rng rng(proj_seed);
        Tensor<double> r = rand_uniform(rng, out.shape(), -1.0, 1.0);
        return ops::sum_all(tape, ops::mul(tape, out, r));
    };
}

}  // namespace detail

// Finite-difference suite over every autodiff op, nseeds independent input
// draws each. corrupt_op names an op whose analytic gradient is perturbed
// by 1% before comparison (negative control).
inline std::vector<CheckResult> run_op_suite(uint64_t base_seed, int nseeds, double tol,
                                             const std::string& corrupt_op = "") {
    struct Fixture {
        std::string name;
        std::function<std::pair<Fn, std::vector<Tensor<double>>>(Rng&)> make;
    };
    using detail::project;
    using detail::rand_binary;
    using detail::rand_distinct;
    using detail::rand_off_kink;
    using detail::rand_uniform;

    std::vector<Fixture> fixtures;
    fixtures.push_back({"conv2d", [](Rng& rng) {
        auto f = project([](Tape<double>& t, std::vector<Tensor<double>>& in) {
            return ops::conv2d(t, in[0], in[1], in[2], ops::Conv2dSpec{1, 1, 1, 1});
        }, rng.next_u64());
        std::vector<Tensor<double>> in{rand_uniform(rng, {2, 3, 6, 7}, -1, 1),
                                       rand_uniform(rng, {4, 3, 3, 3}, -0.5, 0.5),
                                       rand_uniform(rng, {4}, -0.2, 0.2)};
        return std::pair{f, in};
    }});
    fixtures.push_back({"conv2d_strided", [](Rng& rng) {
        auto f = project([](Tape<double>& t, std::vector<Tensor<double>>& in) {
            return ops::conv2d(t, in[0], in[1], in[2], ops::Conv2dSpec{2, 2, 1, 0});
        }, rng.next_u64());
        std::vector<Tensor<double>> in{rand_uniform(rng, {2, 2, 7, 9}, -1, 1),
                                       rand_uniform(rng, {3, 2, 3, 3}, -0.5, 0.5),
                                       rand_uniform(rng, {3}, -0.2, 0.2)};
        return std::pair{f, in};
    }});
    fixtures.push_back({"conv2d_1x1", [](Rng& rng) {
        auto f = project([](Tape<double>& t, std::vector<Tensor<double>>& in) {
            return ops::conv2d(t, in[0], in[1], in[2]);
        }, rng.next_u64());
        std::vector<Tensor<double>> in{rand_uniform(rng, {2, 3, 5, 4}, -1, 1),
                                       rand_uniform(rng, {5, 3, 1, 1}, -0.5, 0.5),
                                       rand_uniform(rng, {5}, -0.2, 0.2)};
        return std::pair{f, in};
    }});
    fixtures.push_back({"batchnorm_train", [](Rng& rng) {
        auto f = project([](Tape<double>& t, std::vector<Tensor<double>>& in) {
            Tensor<double> rm({in[0].dim(1)}), rv = Tensor<double>::full({in[0].dim(1)}, 1.0);
            return ops::batch_norm2d(t, in[0], in[1], in[2], rm, rv, true, 0.99, 1e-5);
        }, rng.next_u64());
        std::vector<Tensor<double>> in{rand_uniform(rng, {3, 4, 4, 5}, -1, 1),
                                       rand_uniform(rng, {4}, 0.5, 1.5),
                                       rand_uniform(rng, {4}, -0.5, 0.5)};
        return std::pair{f, in};
    }});
    fixtures.push_back({"batchnorm_infer", [](Rng& rng) {
        Tensor<double> rm = rand_uniform(rng, {4}, -0.5, 0.5);
        Tensor<double> rv = rand_uniform(rng, {4}, 0.5, 1.5);
        auto f = project([rm, rv](Tape<double>& t, std::vector<Tensor<double>>& in) mutable {
            return ops::batch_norm2d(t, in[0], in[1], in[2], rm, rv, false, 0.99, 1e-5);
        }, rng.next_u64());
        std::vector<Tensor<double>> in{rand_uniform(rng, {2, 4, 3, 5}, -1, 1),
                                       rand_uniform(rng, {4}, 0.5, 1.5),
                                       rand_uniform(rng, {4}, -0.5, 0.5)};
        return std::pair{f, in};
    }});
    fixtures.push_back({"relu", [](Rng& rng) {
        auto f = project([](Tape<double>& t, std::vector<Tensor<double>>& in) {
            return ops::relu(t, in[0]);
        }, rng.next_u64());
        return std::pair{f, std::vector<Tensor<double>>{rand_off_kink(rng, {2, 3, 4, 5})}};
    }});
    fixtures.push_back({"sigmoid", [](Rng& rng) {
        auto f = project([](Tape<double>& t, std::vector<Tensor<double>>& in) {
            return ops::sigmoid(t, in[0]);
        }, rng.next_u64());
        return std::pair{f, std::vector<Tensor<double>>{rand_uniform(rng, {2, 3, 4, 5}, -2, 2)}};
    }});
    fixtures.push_back({"maxpool2d", [](Rng& rng) {
        auto f = project([](Tape<double>& t, std::vector<Tensor<double>>& in) {
            return ops::maxpool2d(t, in[0], 3, 2, 1);
        }, rng.next_u64());
        return std::pair{f, std::vector<Tensor<double>>{rand_distinct(rng, {2, 3, 7, 8})}};
    }});
    fixtures.push_back({"upsample_nearest2x", [](Rng& rng) {
        auto f = project([](Tape<double>& t, std::vector<Tensor<double>>& in) {
            return ops::upsample_nearest2x(t, in[0]);
        }, rng.next_u64());
        return std::pair{f, std::vector<Tensor<double>>{rand_uniform(rng, {2, 3, 4, 5}, -1, 1)}};
    }});
    fixtures.push_back({"concat_channels", [](Rng& rng) {
        auto f = project([](Tape<double>& t, std::vector<Tensor<double>>& in) {
            return ops::concat_channels(t, {in[0], in[1]});
        }, rng.next_u64());
        std::vector<Tensor<double>> in{rand_uniform(rng, {2, 2, 4, 4}, -1, 1),
                                       rand_uniform(rng, {2, 3, 4, 4}, -1, 1)};
        return std::pair{f, in};
    }});
    fixtures.push_back({"global_avg_pool", [](Rng& rng) {
        auto f = project([](Tape<double>& t, std::vector<Tensor<double>>& in) {
            return ops::global_avg_pool(t, in[0]);
        }, rng.next_u64());
        return std::pair{f, std::vector<Tensor<double>>{rand_uniform(rng, {2, 4, 5, 6}, -1, 1)}};
    }});
    fixtures.push_back({"add", [](Rng& rng) {
        auto f = project([](Tape<double>& t, std::vector<Tensor<double>>& in) {
            return ops::add(t, in[0], in[1]);
        }, rng.next_u64());
        std::vector<Tensor<double>> in{rand_uniform(rng, {2, 3, 4, 4}, -1, 1),
                                       rand_uniform(rng, {2, 3, 4, 4}, -1, 1)};
        return std::pair{f, in};
    }});
    fixtures.push_back({"mul", [](Rng& rng) {
        auto f = project([](Tape<double>& t, std::vector<Tensor<double>>& in) {
            return ops::mul(t, in[0], in[1]);
        }, rng.next_u64());
        std::vector<Tensor<double>> in{rand_uniform(rng, {2, 3, 4, 4}, -1, 1),
                                       rand_uniform(rng, {2, 3, 4, 4}, -1, 1)};
        return std::pair{f, in};
    }});
    fixtures.push_back({"scale_channels", [](Rng& rng) {
        auto f = project([](Tape<double>& t, std::vector<Tensor<double>>& in) {
            return ops::scale_channels(t, in[0], in[1]);
        }, rng.next_u64());
        std::vector<Tensor<double>> in{rand_uniform(rng, {2, 4, 3, 3}, -1, 1),
                                       rand_uniform(rng, {2, 4, 1, 1}, 0.1, 0.9)};
        return std::pair{f, in};
    }});
    fixtures.push_back({"sum_all", [](Rng& rng) {
        auto f = [](Tape<double>& t, std::vector<Tensor<double>>& in) {
            return ops::sum_all(t, in[0]);
        };
        return std::pair{Fn(f), std::vector<Tensor<double>>{rand_uniform(rng, {3, 4, 5}, -1, 1)}};
    }});
    fixtures.push_back({"bce_loss", [](Rng& rng) {
        Tensor<double> gt = rand_binary(rng, {2, 1, 6, 6});
        auto f = [gt](Tape<double>& t, std::vector<Tensor<double>>& in) {
            return ops::bce_mean(t, in[0], gt);
        };
        return std::pair{Fn(f), std::vector<Tensor<double>>{rand_uniform(rng, {2, 1, 6, 6}, 0.05, 0.95)}};
    }});
    fixtures.push_back({"soft_iou_loss", [](Rng& rng) {
        Tensor<double> gt = rand_binary(rng, {2, 1, 6, 6});
        gt.data()[0] = 1.0;  // keep the union non-empty
        auto f = [gt](Tape<double>& t, std::vector<Tensor<double>>& in) {
            return ops::soft_iou(t, in[0], gt);
        };
        return std::pair{Fn(f), std::vector<Tensor<double>>{rand_uniform(rng, {2, 1, 6, 6}, 0.05, 0.95)}};
    }});
    fixtures.push_back({"total_loss", [](Rng& rng) {
        Tensor<double> gt = rand_binary(rng, {2, 1, 6, 6});
        gt.data()[0] = 1.0;
        auto f = [gt](Tape<double>& t, std::vector<Tensor<double>>& in) {
            return total_loss(t, in[0], gt).tensor;
        };
        return std::pair{Fn(f), std::vector<Tensor<double>>{rand_uniform(rng, {2, 1, 6, 6}, 0.05, 0.95)}};
    }});

    std::vector<CheckResult> results;
    for (size_t fi = 0; fi < fixtures.size(); ++fi) {
        CheckResult r{fixtures[fi].name, 0.0, tol, true};
        const double corrupt =
            (!corrupt_op.empty() && fixtures[fi].name.rfind(corrupt_op, 0) == 0) ? 1.01 : 1.0;
        for (int s = 0; s < nseeds; ++s) {
            Rng rng(hash_combine(base_seed, fi * 1000 + static_cast<uint64_t>(s)));
            auto [f, inputs] = fixtures[fi].make(rng);
            r.max_rel_err = std::max(
                r.max_rel_err,
                max_rel_error(f, inputs, {1e-5, 1e-6}, corrupt, nullptr, 1e-8, tol));
        }
        r.pass = r.max_rel_err < tol;
        results.push_back(std::move(r));
    }
    return results;
}

// End-to-end check: total loss of the toy dual-input model against finite
// differences over sampled parameter and input elements. Tensors are
// sampled round-robin across seeds so repeated seeds cover the whole
// parameter set.
inline CheckResult run_e2e_check(uint64_t seed, int seed_index, double tol,
                                 double width_factor = 0.0625, int64_t H = 32, int64_t W = 64,
                                 double corrupt = 1.0) {
    ModelConfig cfg;
    cfg.width_factor = width_factor;
    cfg.input_h = H;
    cfg.input_w = W;
    cfg.dual_input = true;

    ModelParams<double> mp = build_model<double>(cfg, seed);
    Rng rng(hash_combine(seed, 0xe2e));
    Tensor<double> real = detail::rand_uniform(rng, {1, 3, H, W}, 0.0, 1.0);
    // continuous sim values: a binary mask's constant regions put maxpool
    // windows on exact ties, which is a kink the difference quotient cannot
    // straddle
    Tensor<double> sim = detail::rand_uniform(rng, {1, 1, H, W}, 0.0, 1.0);
    Tensor<double> gt = detail::rand_binary(rng, {1, 1, H, W}, 0.3);

    std::vector<Tensor<double>> inputs;
    std::vector<std::string> names;
    for (auto& [path, t] : mp.trainable) {
        inputs.push_back(t);
        names.push_back(path);
    }
    inputs.push_back(real);
    inputs.push_back(sim);

    auto f = [&mp, &cfg, gt](Tape<double>& tape, std::vector<Tensor<double>>& in) {
        const size_t n = in.size();
        return total_loss(tape, model_forward(tape, mp, cfg, in[n - 2], in[n - 1], true), gt).tensor;
    };

    // Parameter tensors are probed round-robin (stride 10), so ten seeds
    // touch every tensor exactly once; the two image inputs are probed on
    // every seed.
    std::vector<std::vector<int64_t>> samples(inputs.size());
    for (size_t i = 0; i < inputs.size(); ++i) {
        const bool is_input = i >= inputs.size() - 2;
        const bool mine = is_input || (i + static_cast<size_t>(seed_index)) % 10 == 0;
        if (!mine) continue;
        const int picks = is_input ? 2 : 1;
        for (int k = 0; k < picks; ++k)
            samples[i].push_back(rng.uniform_int(inputs[i].numel()));
    }

    CheckResult r{"model_e2e",
                  max_rel_error(f, inputs, {1e-5, 1e-6, 1e-8}, corrupt, &samples, 1e-5, tol), tol,
                  true};
    r.pass = r.max_rel_err < tol;
    return r;
}

}  // namespace dualseg::gradcheck
