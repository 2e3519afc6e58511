#include "divot/metrics.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <numeric>
#include <sstream>

#include "divot/errors.hpp"
#include "json.hpp"

namespace divot::metrics {

namespace {

constexpr double kCovEps = 1e-6;

void check_set(const FeatureSet& s, const char* which) {
  if (s.dim <= 0) fail_config(std::string("frechet: ") + which + " set has a non-positive dim");
  if (static_cast<int>(s.vectors.size()) != s.rows() * s.dim)
    fail_config(std::string("frechet: ") + which + " set is ragged");
  for (double v : s.vectors)
    if (!std::isfinite(v)) fail_config(std::string("frechet: ") + which + " set has a non-finite value");
  if (s.rows() < s.dim + 1)
    fail_config(std::string("frechet: ") + which + " set needs at least dim + 1 rows");
}

// mean and unbiased covariance (+kCovEps on the diagonal) of [n][m] rows
void fit_gaussian(const FeatureSet& s, std::vector<double>& mu, std::vector<double>& cov) {
  const int n = s.rows();
  const int m = s.dim;
  mu.assign(m, 0.0);
  for (int i = 0; i < n; ++i)
    for (int j = 0; j < m; ++j) mu[j] += s.vectors[static_cast<size_t>(i) * m + j];
  for (double& v : mu) v /= n;
  cov.assign(static_cast<size_t>(m) * m, 0.0);
  for (int i = 0; i < n; ++i) {
    const double* row = s.vectors.data() + static_cast<size_t>(i) * m;
    for (int j = 0; j < m; ++j) {
      const double dj = row[j] - mu[j];
      for (int k = j; k < m; ++k) cov[static_cast<size_t>(j) * m + k] += dj * (row[k] - mu[k]);
    }
  }
  for (int j = 0; j < m; ++j)
    for (int k = j; k < m; ++k) {
      const double v = cov[static_cast<size_t>(j) * m + k] / (n - 1);
      cov[static_cast<size_t>(j) * m + k] = v;
      cov[static_cast<size_t>(k) * m + j] = v;
    }
  for (int j = 0; j < m; ++j) cov[static_cast<size_t>(j) * m + j] += kCovEps;
}

// c = a * b for m x m row-major matrices
void matmul_sq(const std::vector<double>& a, const std::vector<double>& b, int m, std::vector<double>& c) {
  c.assign(static_cast<size_t>(m) * m, 0.0);
  for (int i = 0; i < m; ++i)
    for (int k = 0; k < m; ++k) {
      const double aik = a[static_cast<size_t>(i) * m + k];
      if (aik == 0.0) continue;
      for (int j = 0; j < m; ++j) c[static_cast<size_t>(i) * m + j] += aik * b[static_cast<size_t>(k) * m + j];
    }
}

std::string read_text_file(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) fail_runtime("cannot open " + path);
  std::ostringstream ss;
  ss << in.rdbuf();
  if (!in.good() && !in.eof()) fail_runtime("cannot read " + path);
  return ss.str();
}

void write_text_file(const std::string& path, const std::string& content) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) fail_runtime("cannot open " + path + " for writing");
  out.write(content.data(), static_cast<std::streamsize>(content.size()));
  if (!out.good()) fail_runtime("cannot write " + path);
}

void format_double(std::string& out, double v) {
  char buf[64];
  std::snprintf(buf, sizeof buf, "%.6f", v);
  out += buf;
}

const std::string& checked_field(const std::string& v, const char* name) {
  if (v.find(',') != std::string::npos || v.find('\n') != std::string::npos || v.find('"') != std::string::npos)
    fail_config(std::string("metrics csv: field ") + name + " contains a delimiter");
  return v;
}

}  // namespace

std::array<double, kFeatureDim> factor_embedding(const synth::ProbeResult& r) {
  std::array<double, kFeatureDim> out{};
  if (r.abstained) return out;
  int off = 0;
  out[off + r.factors.shape] = 1.0;
  off += synth::kNumShapes;
  out[off + r.factors.color] = 1.0;
  off += synth::kNumColors;
  out[off + r.factors.pos_q] = 1.0;
  off += 4;
  out[off + r.factors.vel_q] = 1.0;
  off += 4;
  out[off + 0] = r.cx;
  out[off + 1] = r.cy;
  out[off + 2] = r.dx;
  out[off + 3] = r.dy;
  return out;
}

void sym_eig(const double* a, int m, double* eigenvalues, double* eigenvectors) {
  if (m <= 0) fail_config("sym_eig: matrix side must be positive");
  double scale = 0.0;
  for (int i = 0; i < m * m; ++i) {
    if (!std::isfinite(a[i])) fail_config("sym_eig: non-finite matrix entry");
    scale = std::max(scale, std::fabs(a[i]));
  }
  const double sym_tol = 1e-9 * std::max(1.0, scale);
  for (int i = 0; i < m; ++i)
    for (int j = i + 1; j < m; ++j)
      if (std::fabs(a[static_cast<size_t>(i) * m + j] - a[static_cast<size_t>(j) * m + i]) > sym_tol)
        fail_config("sym_eig: matrix is not symmetric");

  std::vector<double> w(a, a + static_cast<size_t>(m) * m);
  std::vector<double> v(static_cast<size_t>(m) * m, 0.0);
  for (int i = 0; i < m; ++i) v[static_cast<size_t>(i) * m + i] = 1.0;

  for (int sweep = 0; sweep < 64; ++sweep) {
    double off = 0.0;
    for (int p = 0; p < m; ++p)
      for (int q = p + 1; q < m; ++q) off += w[static_cast<size_t>(p) * m + q] * w[static_cast<size_t>(p) * m + q];
    if (off <= 1e-30 * std::max(1.0, scale * scale)) break;
    for (int p = 0; p < m; ++p) {
      for (int q = p + 1; q < m; ++q) {
        const double apq = w[static_cast<size_t>(p) * m + q];
        if (std::fabs(apq) <= 1e-300) continue;
        const double theta = (w[static_cast<size_t>(q) * m + q] - w[static_cast<size_t>(p) * m + p]) / (2.0 * apq);
        const double t = (theta >= 0.0 ? 1.0 : -1.0) / (std::fabs(theta) + std::sqrt(theta * theta + 1.0));
        const double c = 1.0 / std::sqrt(t * t + 1.0);
        const double s = t * c;
        for (int k = 0; k < m; ++k) {  // columns p and q
          const double wkp = w[static_cast<size_t>(k) * m + p];
          const double wkq = w[static_cast<size_t>(k) * m + q];
          w[static_cast<size_t>(k) * m + p] = c * wkp - s * wkq;
          w[static_cast<size_t>(k) * m + q] = s * wkp + c * wkq;
        }
        for (int k = 0; k < m; ++k) {  // rows p and q
          const double wpk = w[static_cast<size_t>(p) * m + k];
          const double wqk = w[static_cast<size_t>(q) * m + k];
          w[static_cast<size_t>(p) * m + k] = c * wpk - s * wqk;
          w[static_cast<size_t>(q) * m + k] = s * wpk + c * wqk;
        }
        for (int k = 0; k < m; ++k) {  // accumulate the rotation
          const double vkp = v[static_cast<size_t>(k) * m + p];
          const double vkq = v[static_cast<size_t>(k) * m + q];
          v[static_cast<size_t>(k) * m + p] = c * vkp - s * vkq;
          v[static_cast<size_t>(k) * m + q] = s * vkp + c * vkq;
        }
      }
    }
  }

  std::vector<int> order(m);
  std::iota(order.begin(), order.end(), 0);
  std::sort(order.begin(), order.end(), [&](int x, int y) {
    return w[static_cast<size_t>(x) * m + x] < w[static_cast<size_t>(y) * m + y];
  });
  for (int j = 0; j < m; ++j) {
    eigenvalues[j] = w[static_cast<size_t>(order[j]) * m + order[j]];
    for (int i = 0; i < m; ++i)
      eigenvectors[static_cast<size_t>(i) * m + j] = v[static_cast<size_t>(i) * m + order[j]];
  }
}

double frechet_distance(const FeatureSet& a, const FeatureSet& b) {
  if (a.dim != b.dim) fail_config("frechet: feature dims disagree");
  check_set(a, "first");
  check_set(b, "second");
  const int m = a.dim;

  std::vector<double> mu_a, cov_a, mu_b, cov_b;
  fit_gaussian(a, mu_a, cov_a);
  fit_gaussian(b, mu_b, cov_b);

  // sqrt(cov_a) by eigendecomposition
  std::vector<double> wa(m), va(static_cast<size_t>(m) * m);
  sym_eig(cov_a.data(), m, wa.data(), va.data());
  if (wa[0] <= 0.0) fail_runtime("frechet: covariance is singular beyond regularization");
  std::vector<double> sqrt_a(static_cast<size_t>(m) * m, 0.0);
  for (int i = 0; i < m; ++i)
    for (int j = 0; j < m; ++j) {
      double acc = 0.0;
      for (int k = 0; k < m; ++k)
        acc += va[static_cast<size_t>(i) * m + k] * std::sqrt(wa[k]) * va[static_cast<size_t>(j) * m + k];
      sqrt_a[static_cast<size_t>(i) * m + j] = acc;
    }

  // cross = sqrt_a * cov_b * sqrt_a, symmetrized against roundoff
  std::vector<double> tmp, cross;
  matmul_sq(sqrt_a, cov_b, m, tmp);
  matmul_sq(tmp, sqrt_a, m, cross);
  for (int i = 0; i < m; ++i)
    for (int j = i + 1; j < m; ++j) {
      const double v = 0.5 * (cross[static_cast<size_t>(i) * m + j] + cross[static_cast<size_t>(j) * m + i]);
      cross[static_cast<size_t>(i) * m + j] = v;
      cross[static_cast<size_t>(j) * m + i] = v;
    }

  std::vector<double> wc(m), vc(static_cast<size_t>(m) * m);
  sym_eig(cross.data(), m, wc.data(), vc.data());
  double tr_sqrt = 0.0;
  for (int i = 0; i < m; ++i) {
    if (wc[i] < -1e-8) fail_runtime("frechet: cross term has a significantly negative eigenvalue");
    tr_sqrt += std::sqrt(std::max(0.0, wc[i]));
  }

  double d2 = 0.0;
  for (int j = 0; j < m; ++j) {
    const double dm = mu_a[j] - mu_b[j];
    d2 += dm * dm;
    d2 += cov_a[static_cast<size_t>(j) * m + j] + cov_b[static_cast<size_t>(j) * m + j];
  }
  d2 -= 2.0 * tr_sqrt;
  if (d2 < -1e-6) fail_runtime("frechet: distance went negative beyond tolerance");
  return std::max(0.0, d2);
}

MatchStats aggregate_scores(const std::vector<double>& scores) {
  if (scores.empty()) fail_config("aggregate_scores: no scores");
  MatchStats st;
  st.n = static_cast<int>(scores.size());
  for (double s : scores) {
    if (!std::isfinite(s)) fail_config("aggregate_scores: non-finite score");
    st.mean += s;
  }
  st.mean /= st.n;
  if (st.n >= 2) {
    double ss = 0.0;
    for (double s : scores) ss += (s - st.mean) * (s - st.mean);
    st.ci95 = 1.96 * std::sqrt(ss / (st.n - 1) / st.n);
  }
  return st;
}

namespace {

template <typename T>
double pairwise_impl(const T* rows, int n, int dim) {
  if (dim <= 0) fail_config("mean_pairwise_distance: dim must be positive");
  if (n < 2) return 0.0;
  double total = 0.0;
  for (int i = 0; i < n; ++i)
    for (int j = i + 1; j < n; ++j) {
      double d2 = 0.0;
      const T* ri = rows + static_cast<size_t>(i) * dim;
      const T* rj = rows + static_cast<size_t>(j) * dim;
      for (int k = 0; k < dim; ++k) {
        const double d = static_cast<double>(ri[k]) - static_cast<double>(rj[k]);
        d2 += d * d;
      }
      total += std::sqrt(d2);
    }
  return total / (static_cast<double>(n) * (n - 1) / 2.0);
}

}  // namespace

double mean_pairwise_distance(const double* rows, int n, int dim) { return pairwise_impl(rows, n, dim); }
double mean_pairwise_distance(const float* rows, int n, int dim) { return pairwise_impl(rows, n, dim); }

std::string metrics_csv(const std::vector<RunRow>& rows) {
  std::string out = "run_id,head,mechanism,representation,frechet,factor_match_mean,factor_match_ci95,diversity\n";
  for (const RunRow& r : rows) {
    out += checked_field(r.run_id, "run_id");
    out += ',';
    out += checked_field(r.head, "head");
    out += ',';
    out += checked_field(r.mechanism, "mechanism");
    out += ',';
    out += checked_field(r.representation, "representation");
    out += ',';
    format_double(out, r.frechet);
    out += ',';
    format_double(out, r.factor_match_mean);
    out += ',';
    format_double(out, r.factor_match_ci95);
    out += ',';
    format_double(out, r.diversity);
    out += '\n';
  }
  return out;
}

std::string run_row_json(const RunRow& row) {
  nlohmann::json j;
  j["run_id"] = row.run_id;
  j["head"] = row.head;
  j["mechanism"] = row.mechanism;
  j["representation"] = row.representation;
  j["frechet"] = row.frechet;
  j["factor_match_mean"] = row.factor_match_mean;
  j["factor_match_ci95"] = row.factor_match_ci95;
  j["diversity"] = row.diversity;
  return j.dump(2) + "\n";
}

RunRow parse_run_row_json(const std::string& text) {
  RunRow row;
  try {
    const nlohmann::json j = nlohmann::json::parse(text);
    row.run_id = j.at("run_id").get<std::string>();
    row.head = j.at("head").get<std::string>();
    row.mechanism = j.at("mechanism").get<std::string>();
    row.representation = j.at("representation").get<std::string>();
    row.frechet = j.at("frechet").get<double>();
    row.factor_match_mean = j.at("factor_match_mean").get<double>();
    row.factor_match_ci95 = j.at("factor_match_ci95").get<double>();
    row.diversity = j.at("diversity").get<double>();
  } catch (const nlohmann::json::exception& e) {
    fail_config(std::string("metrics sidecar: ") + e.what());
  }
  return row;
}

std::vector<RunRow> write_report(const std::string& run_dir) {
  namespace fs = std::filesystem;
  if (!fs::is_directory(run_dir)) fail_config("report: not a directory: " + run_dir);

  const std::string sidecar_suffix = ".metrics.json";
  const std::string clips_suffix = ".clips.bin";
  std::vector<std::string> sidecars, clip_bases;
  for (const auto& entry : fs::directory_iterator(run_dir)) {
    if (!entry.is_regular_file()) continue;
    const std::string name = entry.path().filename().string();
    if (name.size() > sidecar_suffix.size() && name.ends_with(sidecar_suffix)) sidecars.push_back(name);
    else if (name.size() > clips_suffix.size() && name.ends_with(clips_suffix))
      clip_bases.push_back(name.substr(0, name.size() - clips_suffix.size()));
  }
  std::sort(sidecars.begin(), sidecars.end());
  std::sort(clip_bases.begin(), clip_bases.end());

  std::string missing;
  for (const std::string& base : clip_bases) {
    const std::string want = base + sidecar_suffix;
    if (!std::binary_search(sidecars.begin(), sidecars.end(), want)) {
      if (!missing.empty()) missing += ", ";
      missing += want;
    }
  }
  if (!missing.empty()) fail_config("report: missing sidecars: " + missing);
  if (sidecars.empty()) fail_config("report: no *.metrics.json sidecars under " + run_dir);

  std::vector<RunRow> rows;
  rows.reserve(sidecars.size());
  for (const std::string& name : sidecars)
    rows.push_back(parse_run_row_json(read_text_file(run_dir + "/" + name)));
  std::sort(rows.begin(), rows.end(), [](const RunRow& x, const RunRow& y) {
    return std::tie(x.head, x.mechanism, x.representation, x.run_id) <
           std::tie(y.head, y.mechanism, y.representation, y.run_id);
  });

  write_text_file(run_dir + "/report.csv", metrics_csv(rows));

  nlohmann::json j;
  j["rows"] = nlohmann::json::array();
  for (const RunRow& r : rows) j["rows"].push_back(nlohmann::json::parse(run_row_json(r)));
  const auto breakdown = [&rows](std::string (*key)(const RunRow&)) {
    nlohmann::json g = nlohmann::json::object();
    for (const RunRow& r : rows) {
      nlohmann::json& slot = g[key(r)];
      if (slot.is_null()) slot = {{"runs", 0}, {"frechet", 0.0}, {"factor_match_mean", 0.0}, {"diversity", 0.0}};
      slot["runs"] = slot["runs"].get<int>() + 1;
      slot["frechet"] = slot["frechet"].get<double>() + r.frechet;
      slot["factor_match_mean"] = slot["factor_match_mean"].get<double>() + r.factor_match_mean;
      slot["diversity"] = slot["diversity"].get<double>() + r.diversity;
    }
    for (auto& [name, slot] : g.items()) {
      const int n = slot["runs"].get<int>();
      slot["frechet"] = slot["frechet"].get<double>() / n;
      slot["factor_match_mean"] = slot["factor_match_mean"].get<double>() / n;
      slot["diversity"] = slot["diversity"].get<double>() / n;
    }
    return g;
  };
  j["by_head"] = breakdown([](const RunRow& r) -> std::string { return r.head; });
  j["by_mechanism"] = breakdown([](const RunRow& r) -> std::string { return r.mechanism; });
  j["by_representation"] = breakdown([](const RunRow& r) -> std::string { return r.representation; });
  write_text_file(run_dir + "/report.json", j.dump(2) + "\n");

  return rows;
}

}  // namespace divot::metrics
