#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <algorithm>
#include <cmath>
#include <cstring>
#include <numeric>
#include <vector>

#include "divot/check.hpp"
#include "divot/diffusion.hpp"
#include "divot/errors.hpp"
#include "divot/heads.hpp"
#include "divot/optim.hpp"

using namespace divot;

namespace {

constexpr double kHalfLn2Pi = 0.5 * nn::kLn2Pi;

// Direct-summation mixture density in double: p = sum_j pi_j * prod_i phi.
// Deliberately avoids log-sum-exp so it is an independent oracle.
double nll_direct(int k, int d, const std::vector<double>& means, const std::vector<double>& log_vars,
                  const std::vector<double>& logits, const double* x) {
  double zmax = *std::max_element(logits.begin(), logits.end());
  double z = 0.0;
  for (int j = 0; j < k; ++j) z += std::exp(logits[j] - zmax);
  double p = 0.0;
  for (int j = 0; j < k; ++j) {
    const double pi_j = std::exp(logits[j] - zmax) / z;
    double dens = 1.0;
    for (int i = 0; i < d; ++i) {
      const double var = std::exp(log_vars[j * d + i]);
      const double diff = x[i] - means[j * d + i];
      dens *= std::exp(-0.5 * diff * diff / var) / std::sqrt(2.0 * M_PI * var);
    }
    p += pi_j * dens;
  }
  return -std::log(p);
}

struct Mixture {
  int k, d;
  std::vector<double> weights;   // [k]
  std::vector<double> means;     // [k*d]
  std::vector<double> sigmas;    // [k*d]
};

void draw_from(const Mixture& m, kern::Rng& rng, float* out) {
  const double u = rng.uniform();
  double acc = 0.0;
  int j = m.k - 1;
  for (int c = 0; c < m.k; ++c) {
    acc += m.weights[c];
    if (u < acc) {
      j = c;
      break;
    }
  }
  for (int i = 0; i < m.d; ++i)
    out[i] = static_cast<float>(m.means[j * m.d + i] + m.sigmas[j * m.d + i] * rng.normal());
}

// Best assignment of true components to predicted ones (exhaustive over
// permutations; component counts here are tiny).
std::vector<int> best_assignment(int k, const std::vector<double>& true_means,
                                 const std::vector<double>& pred_means, int d) {
  std::vector<int> perm(k), best(k);
  std::iota(perm.begin(), perm.end(), 0);
  double best_cost = 1e300;
  do {
    double cost = 0.0;
    for (int j = 0; j < k; ++j)
      for (int i = 0; i < d; ++i) {
        const double diff = true_means[j * d + i] - pred_means[perm[j] * d + i];
        cost += diff * diff;
      }
    if (cost < best_cost) {
      best_cost = cost;
      best = perm;
    }
  } while (std::next_permutation(perm.begin(), perm.end()));
  return best;
}

}  // namespace

TEST_CASE("mixture NLL closed forms") {
  // One standard normal component evaluated at its mean.
  {
    const double mu = 0.7, lv = 0.0, logit = 0.3, x = 0.7;
    CHECK(std::abs(nn::gmm_nll_value(1, 1, &mu, &lv, &logit, &x) - kHalfLn2Pi) < 1e-12);
    CHECK(std::abs(kHalfLn2Pi - 0.918939) < 5e-7);
  }
  // Two unit-variance components at +/-1 with equal weights, evaluated at 0:
  // the density collapses to phi(1), so the NLL is 1/2 + ln sqrt(2 pi).
  {
    const std::vector<double> mu = {1.0, -1.0}, lv = {0.0, 0.0}, logits = {2.5, 2.5};
    const double x = 0.0;
    const double want = 0.5 + kHalfLn2Pi;
    CHECK(std::abs(nn::gmm_nll_value(2, 1, mu.data(), lv.data(), logits.data(), &x) - want) < 1e-12);
    CHECK(std::abs(want - 1.418939) < 5e-7);
  }
}

TEST_CASE("mixture NLL matches direct summation over random cases") {
  kern::Rng rng = kern::Rng::stream(40, "nll-oracle");
  double worst = 0.0;
  for (int trial = 0; trial < 1000; ++trial) {
    const int k = 1 + rng.uniform_int(8);
    const int d = 1 + rng.uniform_int(8);
    std::vector<double> means(k * d), lv(k * d), logits(k);
    for (auto& v : means) v = rng.normal();
    for (auto& v : lv) v = rng.uniform(-3.0, 2.0);
    for (auto& v : logits) v = 2.0 * rng.normal();
    // Evaluate near a random component so the direct sum keeps signal.
    const int c = rng.uniform_int(k);
    std::vector<double> x(d);
    for (int i = 0; i < d; ++i)
      x[i] = means[c * d + i] + std::exp(0.5 * lv[c * d + i]) * rng.normal();
    const double got = nn::gmm_nll_value(k, d, means.data(), lv.data(), logits.data(), x.data());
    const double want = nll_direct(k, d, means, lv, logits, x.data());
    worst = std::max(worst, std::abs(got - want));
  }
  CHECK(worst < 1e-6);
}

TEST_CASE("mixture NLL is invariant to a constant logit shift") {
  kern::Rng rng = kern::Rng::stream(41, "nll-shift");
  const int k = 5, d = 3;
  std::vector<double> means(k * d), lv(k * d), logits(k), shifted(k), x(d);
  for (auto& v : means) v = rng.normal();
  for (auto& v : lv) v = rng.uniform(-2.0, 1.0);
  for (auto& v : logits) v = rng.normal();
  for (auto& v : x) v = rng.normal();
  for (int j = 0; j < k; ++j) shifted[j] = logits[j] + 7.25;
  const double a = nn::gmm_nll_value(k, d, means.data(), lv.data(), logits.data(), x.data());
  const double b = nn::gmm_nll_value(k, d, means.data(), lv.data(), shifted.data(), x.data());
  CHECK(std::abs(a - b) < 1e-9);
}

TEST_CASE("mixture NLL rejects non-finite parameters") {
  std::vector<double> mu = {0.0, 1.0}, lv = {0.0, 0.0}, logits = {0.0, 0.0};
  double x = 0.5;
  mu[1] = std::nan("");
  CHECK_THROWS_AS(nn::gmm_nll_value(2, 1, mu.data(), lv.data(), logits.data(), &x), Error);
  mu[1] = 1.0;
  logits[0] = INFINITY;
  CHECK_THROWS_AS(nn::gmm_nll_value(2, 1, mu.data(), lv.data(), logits.data(), &x), Error);
  logits[0] = 0.0;
  x = std::nan("");
  CHECK_THROWS_AS(nn::gmm_nll_value(2, 1, mu.data(), lv.data(), logits.data(), &x), Error);
}

TEST_CASE("tape NLL agrees with the buffer reference") {
  kern::Rng rng = kern::Rng::stream(42, "nll-tape");
  const int B = 6, k = 4, d = 5;
  std::vector<float> means(B * k * d), lv(B * k * d), logits(B * k), x(B * d);
  for (auto& v : means) v = rng.normalf();
  for (auto& v : lv) v = rng.uniform(-2.0f, 1.0f);
  for (auto& v : logits) v = rng.normalf();
  for (auto& v : x) v = rng.normalf();

  ad::Tape<float> tape;
  tape.set_grad_enabled(false);
  nn::GmmParams<float> p;
  p.k = k;
  p.d = d;
  p.means = tape.input({B, k, d}, means);
  p.log_vars = tape.input({B, k, d}, lv);
  p.logits = tape.input({B, k}, logits);
  nn::GmmHead<float>::Config cfg;
  cfg.lm_dim = 4;
  cfg.token_dim = d;
  cfg.components = k;
  cfg.hidden = 4;
  nn::GmmHead<float> head(cfg);
  const float got = head.nll(tape, p, tape.input({B, d}, x)).scalar();

  double want = 0.0;
  for (int b = 0; b < B; ++b) {
    std::vector<double> mb(means.begin() + b * k * d, means.begin() + (b + 1) * k * d);
    std::vector<double> lb(lv.begin() + b * k * d, lv.begin() + (b + 1) * k * d);
    std::vector<double> gb(logits.begin() + b * k, logits.begin() + (b + 1) * k);
    std::vector<double> xb(x.begin() + b * d, x.begin() + (b + 1) * d);
    want += nn::gmm_nll_value(k, d, mb.data(), lb.data(), gb.data(), xb.data());
  }
  want /= B;
  CHECK(std::abs(got - want) / std::max(1.0, std::abs(want)) < 1e-5);
}

TEST_CASE("projection emits 2kd+k parameters and respects the log-variance clamp") {
  nn::GmmHead<float>::Config cfg;
  cfg.lm_dim = 32;
  cfg.token_dim = 128;
  cfg.components = 16;
  cfg.hidden = 64;
  nn::GmmHead<float> head(cfg);
  CHECK(head.params_per_token() == 4112);
  CHECK(head.params().find("gmm.fc2.w").shape == ad::Shape{64, 4112});

  ad::Tape<float> tape;
  tape.set_grad_enabled(false);
  for (const float hot : {1e6f, -1e6f}) {
    tape.reset();
    auto h = tape.full({3, 32}, hot);
    auto p = head.project(tape, h);
    CHECK(p.means.shape() == ad::Shape{3, 16, 128});
    CHECK(p.log_vars.shape() == ad::Shape{3, 16, 128});
    CHECK(p.logits.shape() == ad::Shape{3, 16});
    for (const float v : p.log_vars.value()) {
      CHECK(v >= nn::kLogVarMin);
      CHECK(v <= nn::kLogVarMax);
    }
  }
}

TEST_CASE("mixture sampling hits closed-form cases") {
  // Temperature zero with one component returns the mean exactly.
  {
    const std::vector<float> mu = {1.5f, -2.0f, 0.25f}, lv = {0.3f, -1.0f, 2.0f}, logits = {0.0f};
    std::vector<float> out(3);
    nn::gmm_sample_row(1, 3, mu.data(), lv.data(), logits.data(), uint64_t{7}, 0.0f, out.data());
    CHECK(std::memcmp(out.data(), mu.data(), sizeof(float) * 3) == 0);
  }
  // A dominant logit wins essentially every draw.
  {
    const std::vector<float> mu = {-10.0f, 0.0f, 10.0f}, lv = {0.0f, 0.0f, 0.0f};
    const std::vector<float> logits = {0.0f, 20.0f, 0.0f};
    kern::Rng rng = kern::Rng::stream(43, "dominant");
    int hits = 0;
    std::vector<float> out(1);
    for (int i = 0; i < 10000; ++i) {
      nn::gmm_sample_row(3, 1, mu.data(), lv.data(), logits.data(), rng, 1.0f, out.data());
      if (std::abs(out[0]) < 5.0f) ++hits;
    }
    CHECK(hits >= 9990);
  }
}

TEST_CASE("mixture sampling matches first moments") {
  const int k = 2, d = 2;
  const std::vector<float> mu = {-1.0f, 2.0f, 3.0f, -0.5f};
  const std::vector<float> lv = {std::log(0.25f), std::log(1.0f), std::log(0.5f), std::log(2.0f)};
  const std::vector<float> logits = {std::log(0.3f), std::log(0.7f)};
  const double w0 = 0.3, w1 = 0.7;
  const int n = 100000;
  kern::Rng rng = kern::Rng::stream(44, "moments");
  std::vector<double> sum(d, 0.0);
  std::vector<float> out(d);
  for (int i = 0; i < n; ++i) {
    nn::gmm_sample_row(k, d, mu.data(), lv.data(), logits.data(), rng, 1.0f, out.data());
    for (int j = 0; j < d; ++j) sum[j] += out[j];
  }
  for (int j = 0; j < d; ++j) {
    const double mean_true = w0 * mu[j] + w1 * mu[d + j];
    const double m2 = w0 * (std::exp(double(lv[j])) + mu[j] * mu[j]) +
                      w1 * (std::exp(double(lv[d + j])) + mu[d + j] * mu[d + j]);
    const double sd = std::sqrt(m2 - mean_true * mean_true);
    CHECK(std::abs(sum[j] / n - mean_true) < 3.0 * sd / std::sqrt(double(n)));
  }
}

TEST_CASE("temperature scales spread but not component choice") {
  const int k = 2, d = 1;
  const std::vector<float> mu = {-50.0f, 50.0f}, lv = {0.0f, 0.0f}, logits = {0.0f, 0.0f};
  // Same seed at two temperatures picks the same component every draw.
  for (int trial = 0; trial < 100; ++trial) {
    float hot = 0.0f, cold = 0.0f;
    nn::gmm_sample_row(k, d, mu.data(), lv.data(), logits.data(), uint64_t(trial), 1.0f, &hot);
    nn::gmm_sample_row(k, d, mu.data(), lv.data(), logits.data(), uint64_t(trial), 0.25f, &cold);
    CHECK(((hot > 0) == (cold > 0)));
  }
  // Sample variance scales with temperature^2 for a single wide component.
  const std::vector<float> mu1 = {0.0f}, lv1 = {std::log(4.0f)}, logit1 = {0.0f};
  kern::Rng rng = kern::Rng::stream(45, "temp-var");
  double ss = 0.0;
  const int n = 20000;
  float out = 0.0f;
  for (int i = 0; i < n; ++i) {
    nn::gmm_sample_row(1, 1, mu1.data(), lv1.data(), logit1.data(), rng, 0.5f, &out);
    ss += double(out) * out;
  }
  CHECK(std::abs(ss / n - 1.0) < 0.05);  // (0.5 * 2)^2 = 1
  // Determinism per seed.
  float a = 0.0f, b = 0.0f;
  nn::gmm_sample_row(1, 1, mu1.data(), lv1.data(), logit1.data(), uint64_t{9}, 1.0f, &a);
  nn::gmm_sample_row(1, 1, mu1.data(), lv1.data(), logit1.data(), uint64_t{9}, 1.0f, &b);
  CHECK(a == b);
  nn::gmm_sample_row(1, 1, mu1.data(), lv1.data(), logit1.data(), uint64_t{10}, 1.0f, &b);
  CHECK(a != b);
}

TEST_CASE("empirical NLL of self-samples settles as draws grow") {
  const int k = 3, d = 2;
  const std::vector<double> mu = {-2.0, 0.0, 2.0, 1.0, 0.0, -2.0};
  const std::vector<double> lv = {-1.0, -0.5, 0.0, -1.5, -0.2, -0.8};
  const std::vector<double> logits = {0.1, 0.6, -0.4};
  std::vector<float> muf(mu.begin(), mu.end()), lvf(lv.begin(), lv.end());
  std::vector<float> logf(logits.begin(), logits.end());

  kern::Rng rng = kern::Rng::stream(46, "self-nll");
  auto mean_nll = [&](int n) {
    double acc = 0.0;
    std::vector<float> s(d);
    std::vector<double> sd(d);
    for (int i = 0; i < n; ++i) {
      nn::gmm_sample_row(k, d, muf.data(), lvf.data(), logf.data(), rng, 1.0f, s.data());
      for (int j = 0; j < d; ++j) sd[j] = s[j];
      acc += nn::gmm_nll_value(k, d, mu.data(), lv.data(), logits.data(), sd.data());
    }
    return acc / n;
  };
  const double ref = mean_nll(200000);  // cross-entropy reference
  // Mean absolute deviation over repetitions shrinks as draws grow.
  const int reps = 30;
  double e1 = 0.0, e2 = 0.0, e3 = 0.0;
  for (int r = 0; r < reps; ++r) {
    e1 += std::abs(mean_nll(200) - ref);
    e2 += std::abs(mean_nll(2000) - ref);
    e3 += std::abs(mean_nll(20000) - ref);
  }
  CHECK(e1 > e2);
  CHECK(e2 > e3);
}

TEST_CASE("mse head closed forms and shape checks") {
  nn::MseHead<float>::Config cfg;
  cfg.lm_dim = 8;
  cfg.token_dim = 6;
  cfg.hidden = 16;
  nn::MseHead<float> head(cfg);

  ad::Tape<float> tape;
  auto pred = tape.full({4, 6}, 0.0f);
  auto ones = tape.full({4, 6}, 1.0f);
  CHECK(nn::mse_loss(tape, ones, ones).scalar() == 0.0f);
  CHECK(nn::mse_loss(tape, pred, ones).scalar() == 1.0f);
  auto wrong = tape.full({4, 5}, 1.0f);
  CHECK_THROWS_AS(nn::mse_loss(tape, pred, wrong), Error);

  auto h = tape.full({4, 8}, 0.5f);
  CHECK(head.predict(tape, h).shape() == ad::Shape{4, 6});
  CHECK_THROWS_AS(head.predict(tape, pred), Error);
}

TEST_CASE("mse loss gradient is 2(pred-target)/n") {
  ad::Tape<double> tape;
  kern::Rng rng = kern::Rng::stream(47, "mse-grad");
  const int n = 12;
  std::vector<double> pv(n), tv(n);
  for (auto& v : pv) v = rng.normal();
  for (auto& v : tv) v = rng.normal();
  auto pred = tape.input({3, 4}, pv, true);
  auto target = tape.input({3, 4}, tv);
  tape.backward(nn::mse_loss(tape, pred, target));
  for (int i = 0; i < n; ++i)
    CHECK(std::abs(pred.grad()[i] - 2.0 * (pv[i] - tv[i]) / n) < 1e-12);
}

TEST_CASE("head losses match finite differences on their inputs") {
  const diff::NoiseSchedule sched(50);
  kern::Rng rng = kern::Rng::stream(48, "head-fd");

  // Mixture head: probe the conditioning vector, then the target.
  nn::GmmHead<double>::Config gc;
  gc.lm_dim = 3;
  gc.token_dim = 2;
  gc.components = 2;
  gc.hidden = 4;
  gc.seed = 21;
  nn::GmmHead<double> gmm(gc);
  const int B = 2;
  std::vector<double> h0(B * gc.lm_dim), x0(B * gc.token_dim);
  for (auto& v : h0) v = rng.normal();
  for (auto& v : x0) v = rng.normal();
  {
    auto f = [&](ad::Tape<double>& t, const std::vector<double>& v) {
      auto h = t.input({B, gc.lm_dim}, v, true);
      return gmm.loss(t, h, t.input({B, gc.token_dim}, x0));
    };
    CHECK(ad::finite_difference_check(f, h0).max_rel_err < 1e-4);
  }
  {
    auto f = [&](ad::Tape<double>& t, const std::vector<double>& v) {
      auto x = t.input({B, gc.token_dim}, v, true);
      return gmm.loss(t, t.input({B, gc.lm_dim}, h0), x);
    };
    CHECK(ad::finite_difference_check(f, x0).max_rel_err < 1e-4);
  }

  // Diffusion head, both prediction modes, probing the clean token.
  for (const auto mode : {diff::PredMode::eps_pred, diff::PredMode::v_pred}) {
    nn::DiffusionHead<double>::Config dc;
    dc.lm_dim = 3;
    dc.token_dim = 2;
    dc.hidden = 6;
    dc.time_dim = 4;
    dc.mode = mode;
    dc.seed = 22;
    nn::DiffusionHead<double> dh(dc);
    std::vector<double> eps(B * dc.token_dim), cond(B * dc.lm_dim), tok(B * dc.token_dim);
    for (auto& v : eps) v = rng.normal();
    for (auto& v : cond) v = rng.normal();
    for (auto& v : tok) v = rng.normal();
    auto f = [&](ad::Tape<double>& t, const std::vector<double>& v) {
      auto x = t.input({B, dc.token_dim}, v, true);
      return dh.loss(t, t.input({B, dc.lm_dim}, cond), x, sched, 17, t.input({B, dc.token_dim}, eps));
    };
    CHECK(ad::finite_difference_check(f, tok).max_rel_err < 1e-4);
  }

  // MSE head, probing the conditioning vector.
  nn::MseHead<double>::Config mc;
  mc.lm_dim = 3;
  mc.token_dim = 2;
  mc.hidden = 4;
  mc.seed = 23;
  nn::MseHead<double> mse(mc);
  std::vector<double> hm(B * mc.lm_dim), xt(B * mc.token_dim);
  for (auto& v : hm) v = rng.normal();
  for (auto& v : xt) v = rng.normal();
  auto f = [&](ad::Tape<double>& t, const std::vector<double>& v) {
    auto h = t.input({B, mc.lm_dim}, v, true);
    return mse.loss(t, h, t.input({B, mc.token_dim}, xt));
  };
  CHECK(ad::finite_difference_check(f, hm).max_rel_err < 1e-4);
}

TEST_CASE("diffusion head loss is zero for a perfect predictor and delegates exactly") {
  const diff::NoiseSchedule sched(50);
  kern::Rng rng = kern::Rng::stream(49, "dh-perfect");
  ad::Tape<float> tape;
  const int B = 3, d = 4, t_step = 20;
  const float abar = sched.alpha_bar(t_step);
  std::vector<float> x0v(B * d), epsv(B * d);
  for (auto& v : x0v) v = rng.normalf();
  for (auto& v : epsv) v = rng.normalf();
  auto x0 = tape.input({B, d}, x0v);
  auto eps = tape.input({B, d}, epsv);

  // Perfect noise predictor.
  auto perfect_eps = [&](ad::Tape<float>& t, ad::Ref<float>, int) { return eps; };
  CHECK(nn::diffusion_head_loss(tape, perfect_eps, x0, sched, t_step, eps, diff::PredMode::eps_pred)
            .scalar() == 0.0f);
  // Perfect velocity predictor.
  auto perfect_v = [&](ad::Tape<float>& t, ad::Ref<float>, int) {
    return t.sub(t.scale(eps, std::sqrt(abar)), t.scale(x0, std::sqrt(1.0f - abar)));
  };
  CHECK(nn::diffusion_head_loss(tape, perfect_v, x0, sched, t_step, eps, diff::PredMode::v_pred)
            .scalar() < 1e-12f);

  // The head loss equals composing its predictor with the shared objective.
  nn::DiffusionHead<float>::Config dc;
  dc.lm_dim = 5;
  dc.token_dim = d;
  dc.hidden = 8;
  dc.time_dim = 6;
  nn::DiffusionHead<float> dh(dc);
  std::vector<float> condv(B * 5);
  for (auto& v : condv) v = rng.normalf();
  auto cond = tape.input({B, 5}, condv);
  const float via_head = dh.loss(tape, cond, x0, sched, t_step, eps).scalar();
  auto xt = diff::forward_diffuse(tape, x0, eps, abar);
  const float via_parts =
      diff::diffusion_loss(tape, dh.predict(tape, xt, t_step, cond), x0, eps, abar, dh.config().mode)
          .scalar();
  CHECK(via_head == via_parts);

  // Contract violations.
  CHECK_THROWS_AS(dh.predict(tape, x0, 0, cond), Error);
  CHECK_THROWS_AS(dh.predict(tape, cond, 1, cond), Error);
}

TEST_CASE("diffusion head sampling is deterministic per seed and condition-sensitive") {
  nn::DiffusionHead<float>::Config dc;
  dc.lm_dim = 4;
  dc.token_dim = 3;
  dc.hidden = 16;
  dc.time_dim = 8;
  nn::DiffusionHead<float> dh(dc);
  const diff::NoiseSchedule sched(50);
  ad::Tape<float> tape;
  const int B = 2;
  std::vector<float> cond = {0.5f, -1.0f, 2.0f, 0.0f, -0.25f, 1.5f, 0.75f, -2.0f};
  std::vector<float> a(B * 3), b(B * 3);
  dh.sample_tokens(tape, cond.data(), B, sched, 11, a.data());
  dh.sample_tokens(tape, cond.data(), B, sched, 11, b.data());
  CHECK(std::memcmp(a.data(), b.data(), sizeof(float) * a.size()) == 0);
  dh.sample_tokens(tape, cond.data(), B, sched, 12, b.data());
  CHECK(std::memcmp(a.data(), b.data(), sizeof(float) * a.size()) != 0);
  for (const float v : a) CHECK(std::isfinite(v));
}

TEST_CASE("mixture head recovers a known three-component mixture") {
  Mixture mix;
  mix.k = 3;
  mix.d = 4;
  mix.weights = {0.5, 0.3, 0.2};
  mix.means = {2.0, 2.0, -2.0, -2.0, -2.0, 2.0, 2.0, -2.0, 0.0, -2.5, 0.0, 2.5};
  mix.sigmas.assign(12, 0.3);

  nn::GmmHead<float>::Config cfg;
  cfg.lm_dim = 8;
  cfg.token_dim = 4;
  cfg.components = 3;
  cfg.hidden = 32;
  cfg.mean_spread = 1.0;
  cfg.var_bias = 1.0;
  cfg.seed = 31;
  nn::GmmHead<float> head(cfg);

  std::vector<ad::Param<float>*> params = head.params().all();

  const int batch = 256;
  ad::Tape<float> tape;
  std::vector<float> ones(batch * cfg.lm_dim, 1.0f), xs(batch * cfg.token_dim);
  float first = 0.0f, last = 0.0f;
  int step = 0;
  // A coarse phase to find the modes, then a cooled phase to pin them down.
  for (const auto& [phase_steps, lr] : {std::pair{2000, 5e-3}, {1000, 5e-4}}) {
    nn::AdamW<float>::Config oc;
    oc.lr = lr;
    oc.weight_decay = 0.0;
    nn::AdamW<float> opt(oc);
    for (int i = 0; i < phase_steps; ++i, ++step) {
      kern::Rng rng = kern::Rng::stream(32, "gmm-recovery", {uint64_t(step)});
      for (int b = 0; b < batch; ++b) draw_from(mix, rng, xs.data() + b * cfg.token_dim);
      tape.reset();
      head.params().zero_grad();
      auto h = tape.borrow({batch, cfg.lm_dim}, ones.data());
      auto x = tape.borrow({batch, cfg.token_dim}, xs.data());
      auto loss = head.loss(tape, h, x);
      tape.backward(loss);
      opt.step(params);
      if (step == 0) first = loss.scalar();
      last = loss.scalar();
    }
  }
  CHECK(last < first);

  tape.reset();
  tape.set_grad_enabled(false);
  auto h1 = tape.full({1, cfg.lm_dim}, 1.0f);
  auto p = head.project(tape, h1);
  std::vector<double> pred_means(p.means.value().begin(), p.means.value().end());
  std::vector<double> logits(p.logits.value().begin(), p.logits.value().end());
  double zmax = *std::max_element(logits.begin(), logits.end());
  double z = 0.0;
  for (double& l : logits) z += std::exp(l - zmax);
  std::vector<double> pred_w(mix.k);
  for (int j = 0; j < mix.k; ++j) pred_w[j] = std::exp(logits[j] - zmax) / z;

  const auto match = best_assignment(mix.k, mix.means, pred_means, mix.d);
  for (int j = 0; j < mix.k; ++j) {
    for (int i = 0; i < mix.d; ++i)
      CHECK(std::abs(mix.means[j * mix.d + i] - pred_means[match[j] * mix.d + i]) < 0.05);
    CHECK(std::abs(mix.weights[j] - pred_w[match[j]]) < 0.05);
  }
}
