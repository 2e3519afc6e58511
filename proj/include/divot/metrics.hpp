#pragma once

// Quantitative evaluation. Generated and real clips are compared as
// distributions in a deterministic factor-embedding space (the oracle
// probe's one-hot discrete factors concatenated with its continuous
// centroid and displacement readouts) with a Frechet distance; semantic
// alignment against a target spec is the fraction of factors the probe
// recovers. A fixed-schema CSV/JSON report collates runs.

#include <array>
#include <string>
#include <vector>

#include "divot/synth.hpp"

namespace divot::metrics {

// ---- factor embedding ----

// One-hot shape, color, position quadrant, and motion quadrant, followed by
// the continuous centroid and displacement. An abstained probe embeds to the
// zero vector, which sits far from every valid embedding (those carry four
// ones).
inline constexpr int kFeatureDim = synth::kNumShapes + synth::kNumColors + 4 + 4 + 4;

std::array<double, kFeatureDim> factor_embedding(const synth::ProbeResult& r);

// ---- feature sets ----

struct FeatureSet {
  int dim = kFeatureDim;
  std::string source;           // "real" or "generated"
  std::vector<double> vectors;  // [n][dim], row-major

  int rows() const { return dim > 0 ? static_cast<int>(vectors.size()) / dim : 0; }
  void append(const double* row) { vectors.insert(vectors.end(), row, row + dim); }
  void append(const std::array<double, kFeatureDim>& row) {
    vectors.insert(vectors.end(), row.begin(), row.end());
  }
};

// ---- linear algebra ----

// Cyclic Jacobi eigendecomposition of a symmetric m x m matrix (row-major).
// Eigenvalues come out ascending; column j of the row-major eigenvector
// matrix pairs with eigenvalues[j], so a = v diag(w) v^T. Rejects
// non-symmetric or non-finite input.
void sym_eig(const double* a, int m, double* eigenvalues, double* eigenvectors);

// Frechet distance between Gaussian fits of two feature sets:
//   |mu_a - mu_b|^2 + tr(cov_a + cov_b - 2 (cov_a^1/2 cov_b cov_a^1/2)^1/2)
// with the matrix square roots taken by eigendecomposition. Covariances are
// the unbiased sample estimates with 1e-6 added to the diagonal; both sets
// need at least dim + 1 rows and finite entries. Eigenvalues of the cross
// term below -1e-8 are an error; small negatives are clamped to zero.
double frechet_distance(const FeatureSet& a, const FeatureSet& b);

// ---- score aggregation ----

struct MatchStats {
  double mean = 0.0;
  double ci95 = 0.0;  // half-width of the normal-approximation 95% interval
  int n = 0;
};

// Mean and 1.96 * standard error of a non-empty score list.
MatchStats aggregate_scores(const std::vector<double>& scores);

// Mean pairwise Euclidean distance between the n rows; zero when n < 2.
double mean_pairwise_distance(const double* rows, int n, int dim);
double mean_pairwise_distance(const float* rows, int n, int dim);

// ---- run reports ----

struct RunRow {
  std::string run_id;
  std::string head;            // generation head name
  std::string mechanism;       // lm mechanism name
  std::string representation;  // "resampled" or "pre-resampler"
  double frechet = 0.0;
  double factor_match_mean = 0.0;
  double factor_match_ci95 = 0.0;
  double diversity = 0.0;
};

// Fixed schema (run_id,head,mechanism,representation,frechet,
// factor_match_mean,factor_match_ci95,diversity), '\n' line ends, six
// decimals. Rows are emitted in the order given; identical rows give
// identical bytes. String fields must not contain delimiters.
std::string metrics_csv(const std::vector<RunRow>& rows);

// One run's sidecar as a pretty-printed JSON object, and its strict parse.
std::string run_row_json(const RunRow& row);
RunRow parse_run_row_json(const std::string& text);

// Collates every *.metrics.json sidecar under run_dir into report.csv and
// report.json (rows sorted by head, mechanism, representation, run id, plus
// per-head / per-mechanism / per-representation mean breakdowns). Generated
// clip dumps (*.clips.bin) must each have a sidecar; missing ones are listed
// in the error, and a directory with no sidecars at all is an error. Returns
// the collated rows.
std::vector<RunRow> write_report(const std::string& run_dir);

}  // namespace divot::metrics
