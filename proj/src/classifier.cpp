#include "shala/eval.hpp"

namespace shala {

json ClassifierConfig::to_json() const {
  return {{"conv_channels", conv_channels}, {"feature_width", feature_width},
          {"iterations", iterations},       {"batch_size", batch_size},
          {"lr", lr},                       {"holdout_fraction", holdout_fraction},
          {"gate", gate},                   {"seed", seed}};
}

ClassifierConfig ClassifierConfig::from_json(const json& j) {
  ClassifierConfig c;
  c.conv_channels = j.at("conv_channels").get<std::vector<int64_t>>();
  c.feature_width = j.at("feature_width").get<int64_t>();
  c.iterations = j.at("iterations").get<int64_t>();
  c.batch_size = j.at("batch_size").get<int64_t>();
  c.lr = j.at("lr").get<double>();
  c.holdout_fraction = j.at("holdout_fraction").get<double>();
  c.gate = j.at("gate").get<double>();
  c.seed = j.at("seed").get<uint64_t>();
  return c;
}

ToyClassifierImpl::ToyClassifierImpl(ModalityInfo info, int64_t num_classes, const ClassifierConfig& config)
    : info_(std::move(info)), num_classes_(num_classes) {
  if (num_classes < 2) throw InvalidArgument("a classifier needs at least two classes");
  int64_t flat = info_.numel();
  if (info_.kind == ModalityKind::image && !config.conv_channels.empty()) {
    conv_ = register_module("conv", ConvDown(info_, config.conv_channels, Activation::relu));
    flat = conv_->flat_width();
  }
  feature_ = register_module("feature", torch::nn::Linear(flat, config.feature_width));
  logits_ = register_module("logits", torch::nn::Linear(config.feature_width, num_classes));
}

torch::Tensor ToyClassifierImpl::features(const torch::Tensor& x) {
  check_modality_shape(info_, x, "classifier");
  auto y = conv_ ? conv_->forward(x) : x.flatten(1);
  return torch::relu(feature_->forward(y));
}

torch::Tensor ToyClassifierImpl::forward(const torch::Tensor& x) { return logits_->forward(features(x)); }

torch::Tensor ToyClassifierImpl::predict(const torch::Tensor& x) {
  torch::NoGradGuard guard;
  return argmax_lowest(forward(x));
}

torch::Tensor argmax_lowest(const torch::Tensor& logits) {
  // Equal maxima resolve to the first column: mark maxima and take the index
  // of the first true entry.
  auto is_max = logits.eq(std::get<0>(logits.max(1, true)));
  auto cols = torch::arange(logits.size(1), torch::kLong).unsqueeze(0).expand_as(is_max);
  auto big = torch::full_like(cols, logits.size(1));
  return torch::where(is_max, cols, big).amin(1);
}

ToyClassifier train_toy_classifier(const Dataset& dataset, int64_t modality, int64_t num_classes,
                                   const ClassifierConfig& config, ClassifierReport* report) {
  if (!(config.holdout_fraction > 0.0 && config.holdout_fraction < 1.0)) {
    throw InvalidArgument("holdout_fraction must lie in (0, 1)");
  }
  const int64_t n = dataset.size();
  const auto n_hold = static_cast<int64_t>(std::llround(config.holdout_fraction * static_cast<double>(n)));
  if (n_hold < 1 || n - n_hold < 1) throw InvalidArgument("dataset too small for a classifier split");
  auto [train_idx, hold_idx] = holdout_split(n, n_hold);

  torch::manual_seed(config.seed);
  ToyClassifier clf(dataset.info(modality), num_classes, config);
  auto x_all = dataset.modality(modality).to(torch::kFloat);
  auto y_all = dataset.labels();
  auto x_train = x_all.index_select(0, train_idx);
  auto y_train = y_all.index_select(0, train_idx);

  Rng rng(mix_seed(config.seed, 0xC1A55));
  torch::optim::Adam opt(clf->parameters(), torch::optim::AdamOptions(config.lr));
  clf->train();
  for (int64_t it = 0; it < config.iterations; ++it) {
    auto idx = rng.randint(x_train.size(0), {config.batch_size});
    auto loss = torch::nn::functional::cross_entropy(clf->forward(x_train.index_select(0, idx)),
                                                     y_train.index_select(0, idx));
    opt.zero_grad();
    loss.backward();
    opt.step();
  }
  clf->eval();

  auto x_hold = x_all.index_select(0, hold_idx);
  auto y_hold = y_all.index_select(0, hold_idx);
  torch::Tensor pred;
  {
    torch::NoGradGuard guard;
    std::vector<torch::Tensor> parts;
    for (int64_t s = 0; s < x_hold.size(0); s += 512) parts.push_back(clf->predict(x_hold.slice(0, s, s + 512)));
    pred = torch::cat(parts);
  }
  const double acc = label_agreement(pred, y_hold);
  if (report != nullptr) {
    report->holdout_accuracy = acc;
    report->holdout_size = n_hold;
  }
  if (acc < config.gate) {
    throw GateFailure("classifier for modality " + std::to_string(modality) + " reached held-out accuracy " +
                      std::to_string(acc) + " < gate " + std::to_string(config.gate));
  }
  return clf;
}

std::vector<torch::Tensor> classify_batch(std::vector<ToyClassifier>& classifiers, const Batch& batch,
                                          int64_t chunk) {
  if (static_cast<int64_t>(classifiers.size()) != batch.num_modalities()) {
    throw ShapeMismatch("one classifier per modality is required");
  }
  torch::NoGradGuard guard;
  std::vector<torch::Tensor> out;
  for (size_t i = 0; i < classifiers.size(); ++i) {
    auto x = batch.x[i].to(torch::kFloat);
    std::vector<torch::Tensor> parts;
    for (int64_t s = 0; s < x.size(0); s += chunk) parts.push_back(classifiers[i]->predict(x.slice(0, s, s + chunk)));
    out.push_back(parts.empty() ? torch::zeros({0}, torch::kLong) : torch::cat(parts));
  }
  return out;
}

torch::Tensor classifier_features(ToyClassifier& classifier, const torch::Tensor& x, int64_t chunk) {
  torch::NoGradGuard guard;
  auto xf = x.to(torch::kFloat);
  std::vector<torch::Tensor> parts;
  for (int64_t s = 0; s < xf.size(0); s += chunk) parts.push_back(classifier->features(xf.slice(0, s, s + chunk)));
  return torch::cat(parts).to(torch::kDouble);
}

}  // namespace shala
