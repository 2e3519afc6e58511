#include "divot/heads.hpp"

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <vector>

namespace divot::nn {

double gmm_nll_value(int k, int d, const double* means, const double* log_vars,
                     const double* logits, const double* x) {
  if (k < 1 || d < 1) fail_runtime("gmm nll: k and d must be positive");
  for (int i = 0; i < k * d; ++i)
    if (!std::isfinite(means[i]) || !std::isfinite(log_vars[i]))
      fail_runtime("gmm nll: non-finite mixture parameter");
  for (int j = 0; j < k; ++j)
    if (!std::isfinite(logits[j])) fail_runtime("gmm nll: non-finite mixture logit");
  for (int i = 0; i < d; ++i)
    if (!std::isfinite(x[i])) fail_runtime("gmm nll: non-finite sample");

  double logit_max = logits[0];
  for (int j = 1; j < k; ++j) logit_max = std::max(logit_max, logits[j]);
  double z = 0.0;
  for (int j = 0; j < k; ++j) z += std::exp(logits[j] - logit_max);
  const double log_z = logit_max + std::log(z);

  std::vector<double> joint(k);
  for (int j = 0; j < k; ++j) {
    double quad = 0.0, logdet = 0.0;
    const double* mu = means + int64_t(j) * d;
    const double* lv = log_vars + int64_t(j) * d;
    for (int i = 0; i < d; ++i) {
      const double diff = x[i] - mu[i];
      quad += diff * diff * std::exp(-lv[i]);
      logdet += lv[i];
    }
    joint[j] = (logits[j] - log_z) - 0.5 * (d * kLn2Pi + logdet + quad);
  }
  double m = joint[0];
  for (int j = 1; j < k; ++j) m = std::max(m, joint[j]);
  double s = 0.0;
  for (int j = 0; j < k; ++j) s += std::exp(joint[j] - m);
  return -(m + std::log(s));
}

void gmm_sample_row(int k, int d, const float* means, const float* log_vars, const float* logits,
                    kern::Rng& rng, float temperature, float* out) {
  // Categorical pick over softmax(logits), accumulated in double.
  double logit_max = logits[0];
  for (int j = 1; j < k; ++j) logit_max = std::max(logit_max, double(logits[j]));
  double z = 0.0;
  for (int j = 0; j < k; ++j) z += std::exp(double(logits[j]) - logit_max);
  const double u = rng.uniform() * z;
  double acc = 0.0;
  int pick = k - 1;
  for (int j = 0; j < k; ++j) {
    acc += std::exp(double(logits[j]) - logit_max);
    if (u < acc) {
      pick = j;
      break;
    }
  }
  const float* mu = means + int64_t(pick) * d;
  const float* lv = log_vars + int64_t(pick) * d;
  for (int i = 0; i < d; ++i) {
    const float sigma = std::exp(0.5f * lv[i]);
    out[i] = mu[i] + temperature * sigma * rng.normalf();
  }
}

void gmm_sample_row(int k, int d, const float* means, const float* log_vars, const float* logits,
                    uint64_t seed, float temperature, float* out) {
  kern::Rng rng = kern::Rng::stream(seed, "gmm-sample");
  gmm_sample_row(k, d, means, log_vars, logits, rng, temperature, out);
}

}  // namespace divot::nn
