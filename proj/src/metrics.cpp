#include <cmath>
#include <fstream>
#include <iomanip>
#include <map>
#include <sstream>

#include "shala/eval.hpp"

namespace shala {

namespace {

Eigen::MatrixXd to_eigen(const torch::Tensor& t) {
  auto c = t.to(torch::kDouble).contiguous();
  if (c.dim() != 2) throw ShapeMismatch("expected a 2-D tensor, got " + c10::str(c.sizes()));
  Eigen::MatrixXd m(c.size(0), c.size(1));
  auto acc = c.accessor<double, 2>();
  for (int64_t i = 0; i < c.size(0); ++i) {
    for (int64_t j = 0; j < c.size(1); ++j) m(i, j) = acc[i][j];
  }
  return m;
}

/// Symmetric PSD square root via eigendecomposition; tiny negative
/// eigenvalues from round-off are clipped.
Eigen::MatrixXd psd_sqrt(const Eigen::MatrixXd& a) {
  Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> es(a);
  auto ev = es.eigenvalues().cwiseMax(0.0).cwiseSqrt();
  return es.eigenvectors() * ev.asDiagonal() * es.eigenvectors().transpose();
}

double log_det_spd(const Eigen::MatrixXd& a) {
  Eigen::LLT<Eigen::MatrixXd> llt(a);
  if (llt.info() != Eigen::Success) throw NumericalError("covariance is not positive definite");
  return 2.0 * llt.matrixL().toDenseMatrix().diagonal().array().log().sum();
}

double mean_pairwise(const torch::Tensor& a, const torch::Tensor& b, bool exclude_diagonal) {
  auto d = torch::cdist(a, b);
  const double total = d.sum().item<double>();
  const double na = static_cast<double>(a.size(0)), nb = static_cast<double>(b.size(0));
  // The diagonal of a self-distance matrix is exactly zero, so excluding it
  // only changes the normalizer.
  return exclude_diagonal ? total / (na * (na - 1.0)) : total / (na * nb);
}

torch::Tensor as_images(const torch::Tensor& t) {
  if (t.dim() == 3) return t.unsqueeze(0);
  if (t.dim() != 4) throw ShapeMismatch("expected images [N, H, W, C], got " + c10::str(t.sizes()));
  return t;
}

void check_same_shape(const torch::Tensor& a, const torch::Tensor& b, const char* what) {
  if (a.sizes() != b.sizes()) {
    throw ShapeMismatch(std::string(what) + ": shapes " + c10::str(a.sizes()) + " and " + c10::str(b.sizes()) +
                        " differ");
  }
}

}  // namespace

double joint_coherence(const std::vector<torch::Tensor>& predictions) {
  if (predictions.empty() || predictions.front().numel() == 0) {
    throw InvalidArgument("coherence needs a non-empty sample set");
  }
  auto agree = torch::ones_like(predictions.front(), torch::kBool);
  for (size_t i = 1; i < predictions.size(); ++i) agree = agree & predictions[i].eq(predictions.front());
  return agree.to(torch::kDouble).mean().item<double>();
}

double label_agreement(const torch::Tensor& predictions, const torch::Tensor& reference) {
  if (predictions.numel() == 0) throw InvalidArgument("agreement needs a non-empty sample set");
  check_same_shape(predictions, reference, "label_agreement");
  return predictions.eq(reference).to(torch::kDouble).mean().item<double>();
}

double conditional_coherence(const std::vector<std::pair<torch::Tensor, torch::Tensor>>& pairs) {
  if (pairs.empty()) throw InvalidArgument("conditional coherence needs at least one modality pair");
  double total = 0.0;
  for (const auto& [observed, generated] : pairs) total += label_agreement(generated, observed);
  return total / static_cast<double>(pairs.size());
}

GaussianFit fit_gaussian(const torch::Tensor& samples) {
  if (samples.dim() != 2 || samples.size(0) < 2) throw InvalidArgument("a Gaussian fit needs at least two rows");
  auto x = to_eigen(samples);
  GaussianFit fit;
  fit.mean = x.colwise().mean().transpose();
  auto centered = x.rowwise() - fit.mean.transpose();
  fit.covariance = centered.transpose() * centered / static_cast<double>(x.rows() - 1);
  return fit;
}

double frechet_distance(const GaussianFit& a, const GaussianFit& b, double eps) {
  if (a.mean.size() != b.mean.size()) throw ShapeMismatch("Fréchet distance between different dimensions");
  const auto d = a.mean.size();
  Eigen::MatrixXd s1 = a.covariance + eps * Eigen::MatrixXd::Identity(d, d);
  Eigen::MatrixXd s2 = b.covariance + eps * Eigen::MatrixXd::Identity(d, d);
  // tr((S1 S2)^{1/2}) = tr((S1^{1/2} S2 S1^{1/2})^{1/2}), the symmetric form.
  Eigen::MatrixXd r1 = psd_sqrt(s1);
  Eigen::MatrixXd inner = r1 * s2 * r1;
  inner = 0.5 * (inner + inner.transpose());
  Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> es(inner, Eigen::EigenvaluesOnly);
  const double tr_sqrt = es.eigenvalues().cwiseMax(0.0).cwiseSqrt().sum();
  const double value = (a.mean - b.mean).squaredNorm() + s1.trace() + s2.trace() - 2.0 * tr_sqrt;
  return std::max(0.0, value);
}

double frechet_distance(const torch::Tensor& a, const torch::Tensor& b, double eps) {
  return frechet_distance(fit_gaussian(a), fit_gaussian(b), eps);
}

double energy_distance(const torch::Tensor& a, const torch::Tensor& b) {
  if (a.dim() != 2 || b.dim() != 2 || a.size(1) != b.size(1)) throw ShapeMismatch("energy distance inputs");
  if (a.size(0) < 2 || b.size(0) < 2) throw InvalidArgument("energy distance needs two rows per set");
  auto x = a.to(torch::kDouble), y = b.to(torch::kDouble);
  return 2.0 * mean_pairwise(x, y, false) - mean_pairwise(x, x, true) - mean_pairwise(y, y, true);
}

double energy_permutation_test(const torch::Tensor& a, const torch::Tensor& b, int64_t permutations, Rng& rng) {
  if (permutations < 1) throw InvalidArgument("need at least one permutation");
  auto pooled = torch::cat({a, b}).to(torch::kDouble);
  const int64_t na = a.size(0);
  const double observed = energy_distance(a, b);
  int64_t at_least = 0;
  for (int64_t p = 0; p < permutations; ++p) {
    auto perm = rng.permutation(pooled.size(0));
    auto shuffled = pooled.index_select(0, perm);
    if (energy_distance(shuffled.slice(0, 0, na), shuffled.slice(0, na)) >= observed) ++at_least;
  }
  return static_cast<double>(at_least + 1) / static_cast<double>(permutations + 1);
}

double gaussian_kl(const GaussianFit& p, const GaussianFit& q) {
  const auto d = p.mean.size();
  if (q.mean.size() != d) throw ShapeMismatch("KL between different dimensions");
  Eigen::LLT<Eigen::MatrixXd> llt(q.covariance);
  if (llt.info() != Eigen::Success) throw NumericalError("reference covariance is not positive definite");
  const Eigen::VectorXd diff = q.mean - p.mean;
  const double trace = llt.solve(p.covariance).trace();
  const double maha = diff.dot(llt.solve(diff));
  return 0.5 * (trace + maha - static_cast<double>(d) + log_det_spd(q.covariance) - log_det_spd(p.covariance));
}

double prior_gap(const torch::Tensor& samples) {
  if (samples.dim() != 2 || samples.size(0) < samples.size(1) + 1) {
    throw InvalidArgument("prior gap needs at least d + 1 samples");
  }
  auto fit = fit_gaussian(samples);
  const auto d = fit.mean.size();
  GaussianFit standard{Eigen::VectorXd::Zero(d), Eigen::MatrixXd::Identity(d, d)};
  return gaussian_kl(fit, standard);
}

double fitted_gap(const torch::Tensor& samples, const torch::Tensor& reference) {
  if (samples.size(0) < samples.size(1) + 1 || reference.size(0) < reference.size(1) + 1) {
    throw InvalidArgument("a fitted gap needs at least d + 1 samples per set");
  }
  return gaussian_kl(fit_gaussian(samples), fit_gaussian(reference));
}

double oracle_posterior_kl(const GaussianPosterior& learned, const torch::Tensor& analytic_mean,
                           const torch::Tensor& analytic_covariance) {
  const int64_t d = learned.dim();
  if (analytic_mean.dim() != 2 || analytic_mean.size(1) != d || analytic_covariance.size(0) != d ||
      analytic_covariance.size(1) != d || analytic_mean.size(0) != learned.mean.size(0)) {
    throw ShapeMismatch("oracle KL: learned and analytic posteriors disagree in shape");
  }
  auto cov = analytic_covariance.to(torch::kDouble);
  auto prec = torch::linalg_inv(cov);
  const double logdet_p = std::get<1>(torch::linalg_slogdet(cov)).item<double>();
  auto qm = learned.mean.to(torch::kDouble), qv = learned.variance.to(torch::kDouble);
  auto diff = analytic_mean.to(torch::kDouble) - qm;
  auto trace = (qv * prec.diagonal().unsqueeze(0)).sum(1);
  auto maha = (diff.matmul(prec) * diff).sum(1);
  auto kl = 0.5 * (trace + maha - static_cast<double>(d) + logdet_p - qv.log().sum(1));
  return kl.mean().item<double>();
}

double psnr(const torch::Tensor& a, const torch::Tensor& b) {
  check_same_shape(a, b, "psnr");
  const double mse = (a.to(torch::kDouble) - b.to(torch::kDouble)).pow(2).mean().item<double>();
  if (mse <= 0.0) return kPsnrCap;
  return std::min(kPsnrCap, 10.0 * std::log10(1.0 / mse));
}

torch::Tensor psnr_per_image(const torch::Tensor& a, const torch::Tensor& b) {
  check_same_shape(a, b, "psnr");
  auto x = as_images(a).to(torch::kDouble), y = as_images(b).to(torch::kDouble);
  auto mse = (x - y).pow(2).flatten(1).mean(1);
  auto value = 10.0 * torch::log10(1.0 / mse);
  return torch::where(mse.le(0.0), torch::full_like(mse, kPsnrCap), value.clamp_max(kPsnrCap));
}

torch::Tensor ssim_per_image(const torch::Tensor& a, const torch::Tensor& b) {
  check_same_shape(a, b, "ssim");
  constexpr int64_t kWindow = 11;
  constexpr double kSigma = 1.5, k1 = 0.01, k2 = 0.03;
  auto x = as_images(a).to(torch::kDouble), y = as_images(b).to(torch::kDouble);
  const int64_t n = x.size(0), h = x.size(1), w = x.size(2), c = x.size(3);
  if (h < kWindow || w < kWindow) throw ShapeMismatch("ssim needs images of at least 11x11");
  auto coords = torch::arange(kWindow, torch::kDouble) - (kWindow - 1) / 2.0;
  auto g = torch::exp(-coords.pow(2) / (2.0 * kSigma * kSigma));
  g = g / g.sum();
  auto window = torch::outer(g, g).view({1, 1, kWindow, kWindow});
  auto planes = [&](const torch::Tensor& t) { return t.permute({0, 3, 1, 2}).reshape({n * c, 1, h, w}); };
  auto px = planes(x), py = planes(y);
  auto filt = [&](const torch::Tensor& t) { return torch::conv2d(t, window); };
  auto mx = filt(px), my = filt(py);
  auto sxx = filt(px * px) - mx * mx;
  auto syy = filt(py * py) - my * my;
  auto sxy = filt(px * py) - mx * my;
  const double c1 = k1 * k1, c2 = k2 * k2;
  auto map = ((2 * mx * my + c1) * (2 * sxy + c2)) / ((mx * mx + my * my + c1) * (sxx + syy + c2));
  return map.reshape({n, c, -1}).mean(2).mean(1);
}

double ssim(const torch::Tensor& a, const torch::Tensor& b) { return ssim_per_image(a, b).mean().item<double>(); }

double color_histogram_distance(const torch::Tensor& a, const torch::Tensor& b, int64_t bins) {
  auto x = as_images(a).to(torch::kDouble), y = as_images(b).to(torch::kDouble);
  if (x.size(3) != y.size(3)) throw ShapeMismatch("histogram inputs differ in channel count");
  const int64_t c = x.size(3);
  double total = 0.0;
  for (int64_t ch = 0; ch < c; ++ch) {
    auto hx = torch::histc(x.select(3, ch).clamp(0.0, 1.0), bins, 0.0, 1.0);
    auto hy = torch::histc(y.select(3, ch).clamp(0.0, 1.0), bins, 0.0, 1.0);
    total += (hx / hx.sum() - hy / hy.sum()).abs().sum().item<double>();
  }
  return total / static_cast<double>(c);
}

void MetricRecord::validate() const {
  if (!std::isfinite(value)) throw NumericalError("metric '" + name + "' is not finite");
  if (count <= 0) throw NumericalError("metric '" + name + "' has no samples");
}

json MetricRecord::to_json() const {
  return {{"name", name}, {"value", value}, {"count", count}, {"config_digest", config_digest},
          {"seed", seed}, {"details", details}};
}

MetricRecord MetricRecord::from_json(const json& j) {
  MetricRecord r;
  r.name = j.at("name").get<std::string>();
  r.value = j.at("value").get<double>();
  r.count = j.at("count").get<int64_t>();
  r.config_digest = j.at("config_digest").get<std::string>();
  r.seed = j.at("seed").get<uint64_t>();
  r.details = j.value("details", json::object());
  return r;
}

std::string records_to_jsonl(const std::vector<MetricRecord>& records) {
  std::string out;
  for (const auto& r : records) {
    r.validate();
    out += r.to_json().dump();
    out += '\n';
  }
  return out;
}

std::vector<MetricRecord> records_from_jsonl(const std::string& text) {
  std::vector<MetricRecord> out;
  std::istringstream in(text);
  std::string line;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    out.push_back(MetricRecord::from_json(json::parse(line)));
  }
  return out;
}

void append_records(const std::vector<MetricRecord>& records, const std::filesystem::path& file) {
  if (file.has_parent_path()) std::filesystem::create_directories(file.parent_path());
  std::ofstream out(file, std::ios::app | std::ios::binary);
  if (!out) throw Error("cannot append to " + file.string());
  out << records_to_jsonl(records);
}

MetricTable tabulate(const std::vector<std::pair<std::string, std::vector<MetricRecord>>>& runs) {
  MetricTable t;
  std::map<std::string, size_t> row_of;
  for (const auto& [run, records] : runs) {
    t.columns.push_back(run);
    for (const auto& r : records) {
      if (row_of.emplace(r.name, t.rows.size()).second) t.rows.push_back(r.name);
    }
  }
  t.cells.assign(t.rows.size(), std::vector<std::optional<double>>(t.columns.size()));
  for (size_t c = 0; c < runs.size(); ++c) {
    for (const auto& r : runs[c].second) t.cells[row_of.at(r.name)][c] = r.value;
  }
  return t;
}

namespace {

std::string format_cell(const std::optional<double>& v) {
  if (!v) return "absent";
  std::ostringstream s;
  s << std::setprecision(6) << *v;
  return s.str();
}

}  // namespace

std::string MetricTable::to_text() const {
  std::vector<size_t> width(columns.size() + 1, 6);
  for (const auto& r : rows) width[0] = std::max(width[0], r.size());
  for (size_t c = 0; c < columns.size(); ++c) {
    width[c + 1] = std::max(width[c + 1], columns[c].size());
    for (const auto& row : cells) width[c + 1] = std::max(width[c + 1], format_cell(row[c]).size());
  }
  std::ostringstream out;
  out << std::left << std::setw(static_cast<int>(width[0])) << "metric";
  for (size_t c = 0; c < columns.size(); ++c) out << "  " << std::setw(static_cast<int>(width[c + 1])) << columns[c];
  out << "\n";
  for (size_t r = 0; r < rows.size(); ++r) {
    out << std::setw(static_cast<int>(width[0])) << rows[r];
    for (size_t c = 0; c < columns.size(); ++c) {
      out << "  " << std::setw(static_cast<int>(width[c + 1])) << format_cell(cells[r][c]);
    }
    out << "\n";
  }
  return out.str();
}

std::string MetricTable::to_csv() const {
  std::ostringstream out;
  out << "metric";
  for (const auto& c : columns) out << "," << c;
  out << "\n";
  for (size_t r = 0; r < rows.size(); ++r) {
    out << rows[r];
    for (size_t c = 0; c < columns.size(); ++c) out << "," << format_cell(cells[r][c]);
    out << "\n";
  }
  return out.str();
}

}  // namespace shala
