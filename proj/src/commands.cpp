#include "eamser/commands.hpp"

#include <cstdio>
#include <fstream>
#include <map>
#include <memory>
#include <ostream>
#include <sstream>

#include <nlohmann/json.hpp>

#include "eamser/error.hpp"
#include "eamser/losses.hpp"
#include "eamser/model.hpp"
#include "eamser/nn.hpp"

namespace eamser {

int exit_code_for(Errc code) noexcept {
  switch (code) {
    case Errc::invalid_argument:
      return kExitUsage;
    case Errc::domain_error:
      return kExitNumeric;
    default:
      return kExitData;
  }
}

std::vector<std::string> split_classes(const std::string& csv) {
  std::vector<std::string> out;
  std::stringstream ss(csv);
  std::string item;
  while (std::getline(ss, item, ','))
    if (!item.empty()) out.push_back(item);
  return out;
}

namespace {

using nlohmann::ordered_json;

struct Split {
  std::vector<const ManifestEntry*> train;
  std::vector<const ManifestEntry*> test;
};

/// Originals are split by fold; mixed utterances (those with a soft label)
/// only ever join the training side, and only when their tag matches `mixup`.
Split split_manifest(const Manifest& m, const FoldOptions& f, unsigned long long seed,
                     MixupMode mixup) {
  std::vector<ManifestEntry> originals;
  for (const auto& e : m.entries)
    if (!e.soft_label) originals.push_back(e);

  Split split;
  if (f.fold < 0) {
    for (const auto& e : m.entries)
      if (!e.soft_label || (mixup != MixupMode::none && e.mixup == std::string(to_string(mixup))))
        split.train.push_back(&e);
    return split;
  }
  if (f.fold >= f.n_folds)
    throw Error(Errc::invalid_argument, "fold " + std::to_string(f.fold) + " outside [0, " +
                                            std::to_string(f.n_folds) + ")");
  const FoldPlan plan = make_folds(originals, f.n_folds, f.group_key, seed);
  for (const auto& e : m.entries) {
    if (e.soft_label) {
      if (mixup == MixupMode::none || e.mixup != std::string(to_string(mixup))) continue;
      if (plan.fold_of(e) != f.fold) split.train.push_back(&e);
    } else if (plan.fold_of(e) == f.fold) {
      split.test.push_back(&e);
    } else {
      split.train.push_back(&e);
    }
  }
  return split;
}

Dataset load_dataset(const std::vector<const ManifestEntry*>& entries, int n_classes,
                     int& feature_dim) {
  Dataset data;
  data.reserve(entries.size());
  for (const ManifestEntry* e : entries) {
    data.push_back(load_example(*e, n_classes));
    const int d = static_cast<int>(data.back().features.cols());
    if (feature_dim == 0) feature_dim = d;
    if (d != feature_dim)
      throw Error(Errc::dimension_mismatch, "'" + e->id + "' has " + std::to_string(d) +
                                                " features, expected " + std::to_string(feature_dim));
  }
  return data;
}

void check_checkpoint_fits(const Checkpoint& ck, int n_classes) {
  if (ck.config.n_classes != n_classes)
    throw Error(Errc::dimension_mismatch, "checkpoint has " + std::to_string(ck.config.n_classes) +
                                              " classes, class list has " + std::to_string(n_classes));
}

std::string mix_name(int index) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "mix_%05d", index);
  return buf;
}

}  // namespace

// ---------------------------------------------------------------------------

AugmentSummary run_augment(const AugmentOptions& opts, std::ostream& log) {
  opts.mix.validate();
  if (opts.pairs < 0) throw Error(Errc::invalid_argument, "--pairs must be >= 0");
  if (opts.mixup == MixupMode::none)
    throw Error(Errc::invalid_argument, "augment needs --mixup eam or lam");

  const Manifest m = read_manifest(opts.manifest, opts.classes);
  const int n_classes = static_cast<int>(m.classes.size());
  AugmentSummary summary;
  if (opts.pairs == 0) return summary;

  std::vector<ManifestEntry> sources;
  for (const auto& e : m.entries)
    if (e.audio_path && !e.soft_label) sources.push_back(e);
  if (sources.empty()) throw Error(Errc::empty_dataset, "no manifest entries carry audio_path");

  std::vector<int> fold_of(sources.size(), 0);
  if (opts.folds.n_folds > 1) {
    const FoldPlan plan = make_folds(sources, opts.folds.n_folds, opts.folds.group_key, opts.seed);
    for (std::size_t i = 0; i < sources.size(); ++i) fold_of[i] = plan.fold_of(sources[i]);
  }
  std::map<int, std::vector<std::size_t>> by_fold;
  for (std::size_t i = 0; i < sources.size(); ++i) by_fold[fold_of[i]].push_back(i);

  std::filesystem::create_directories(opts.out_dir);
  std::ofstream manifest_out(opts.out_dir / "augmented.jsonl", std::ios::trunc);
  if (!manifest_out) throw Error(Errc::io_error, "cannot write " + (opts.out_dir / "augmented.jsonl").string());

  std::map<std::size_t, std::unique_ptr<Waveform>> cache;
  auto wave = [&](std::size_t i) -> const Waveform& {
    auto& slot = cache[i];
    if (!slot) slot = std::make_unique<Waveform>(load_wav(*sources[i].audio_path));
    return *slot;
  };

  Rng rng(opts.seed);
  MixConfig mix = opts.mix;
  mix.rng_seed = opts.seed;
  for (int pair = 0; pair < opts.pairs; ++pair) {
    const std::size_t i = std::uniform_int_distribution<std::size_t>(0, sources.size() - 1)(rng);
    const auto& pool = by_fold[fold_of[i]];
    std::size_t j = i;
    if (pool.size() > 1) {
      // Draw among the other members of the fold.
      std::size_t k = std::uniform_int_distribution<std::size_t>(0, pool.size() - 2)(rng);
      j = pool[k] == i ? pool.back() : pool[k];
    }

    const ManifestEntry& ei = sources[i];
    const ManifestEntry& ej = sources[j];
    LabeledWaveform xi{wave(i), ei.label_index};
    LabeledWaveform xj{wave(j), ej.label_index};
    std::optional<MixResult> r;
    try {
      r = opts.mixup == MixupMode::eam ? eam_augment(xi, xj, n_classes, mix, rng)
                                       : lam_augment(xi, xj, n_classes, mix, rng);
    } catch (const Error& e) {
      if (e.code() != Errc::silent_segment && e.code() != Errc::segment_too_short) throw;
      log << "skip pair " << pair << " (" << ei.id << ", " << ej.id << "): " << e.what() << '\n';
      ++summary.skipped;
      continue;
    }

    const std::string name = mix_name(summary.written);
    save_wav(r->mixed, opts.out_dir / (name + ".wav"));

    const Eigen::VectorXd& probs = r->label.probs();
    ordered_json side;
    side["label"] = std::vector<double>(probs.begin(), probs.end());
    side["l_mix"] = r->params.l_mix;
    side["start_i"] = r->params.start_i;
    side["start_j"] = r->params.start_j;
    side["snr_db"] = r->params.snr_db;
    side["scale"] = r->scale;
    side["classes"] = m.classes;
    side["mixup"] = to_string(opts.mixup);
    side["source_i"] = ei.id;
    side["source_j"] = ej.id;
    std::ofstream(opts.out_dir / (name + ".json"), std::ios::trunc) << side.dump(2) << '\n';

    ManifestEntry out;
    out.id = name;
    out.audio_path = name + ".wav";
    out.label = m.classes[static_cast<std::size_t>(r->label.hard_label())];
    out.speaker = ei.speaker;
    out.session = ei.session;
    out.soft_label = probs;
    out.mixup = to_string(opts.mixup);
    manifest_out << to_json_line(out) << '\n';
    ++summary.written;
  }
  log << "wrote " << summary.written << " mixes, skipped " << summary.skipped << '\n';
  return summary;
}

// ---------------------------------------------------------------------------

TrainSummary run_train(const TrainOptions& opts, std::ostream& log) {
  opts.train.validate();
  if (opts.classes.empty()) throw Error(Errc::invalid_argument, "--classes is required");
  if (opts.out.empty()) throw Error(Errc::invalid_argument, "--out is required");

  const Manifest m = read_manifest(opts.manifest, opts.classes);
  const int n_classes = static_cast<int>(m.classes.size());
  const Split split = split_manifest(m, opts.folds, opts.train.seed, opts.train.mixup);
  if (split.train.empty()) throw Error(Errc::empty_dataset, "no training utterances");

  int feature_dim = 0;
  const Dataset train_set = load_dataset(split.train, n_classes, feature_dim);
  const Dataset test_set = load_dataset(split.test, n_classes, feature_dim);

  TrainSummary summary;
  summary.config = opts.train.model_config(feature_dim, n_classes);
  summary.train_size = train_set.size();
  summary.test_size = test_set.size();

  Rng rng(opts.train.seed);
  ModelParams<double> params = init_model<double>(summary.config, rng);

  const std::filesystem::path log_path =
      opts.log.empty() ? std::filesystem::path(opts.out.string() + ".log.jsonl") : opts.log;
  std::ofstream log_out(log_path, std::ios::trunc);
  if (!log_out) throw Error(Errc::io_error, "cannot write " + log_path.string());

  log << "train " << train_set.size() << " / test " << test_set.size() << " utterances, D="
      << feature_dim << ", classes=" << n_classes << '\n';
  summary.records = train(train_set, test_set, params, summary.config, opts.train, rng,
                          [&](const EpochRecord& r) {
                            const std::string line = to_json_line(r);
                            log_out << line << '\n';
                            log_out.flush();
                            log << line << '\n';
                          });
  save_checkpoint(opts.out, summary.config, params);
  return summary;
}

// ---------------------------------------------------------------------------

std::string run_evaluate(const EvaluateOptions& opts) {
  if (opts.classes.empty()) throw Error(Errc::invalid_argument, "--classes is required");
  const Checkpoint ck = load_checkpoint(opts.checkpoint);
  const Manifest m = read_manifest(opts.manifest, opts.classes);
  const int n_classes = static_cast<int>(m.classes.size());
  check_checkpoint_fits(ck, n_classes);

  Split split = split_manifest(m, opts.folds, opts.seed, MixupMode::none);
  const auto& chosen = opts.folds.fold < 0 ? split.train : split.test;
  int feature_dim = ck.config.feature_dim;
  const Dataset data = load_dataset(chosen, n_classes, feature_dim);
  const Evaluation ev = evaluate(data, ck.params, ck.config, opts.threads);

  ordered_json j;
  j["wa"] = ev.metrics.wa;
  j["ua"] = ev.metrics.ua;
  j["n"] = data.size();
  j["classes"] = m.classes;
  ordered_json conf = ordered_json::array();
  for (Eigen::Index r = 0; r < ev.metrics.confusion.rows(); ++r) {
    ordered_json row = ordered_json::array();
    for (Eigen::Index c = 0; c < ev.metrics.confusion.cols(); ++c) row.push_back(ev.metrics.confusion(r, c));
    conf.push_back(row);
  }
  j["confusion"] = conf;
  ordered_json preds = ordered_json::array();
  for (std::size_t i = 0; i < data.size(); ++i)
    preds.push_back({{"id", data[i].id},
                     {"label", m.classes[static_cast<std::size_t>(data[i].label)]},
                     {"pred", m.classes[static_cast<std::size_t>(ev.predictions[i])]}});
  j["predictions"] = preds;
  return j.dump();
}

void run_dump_embeddings(const DumpOptions& opts) {
  if (opts.classes.empty()) throw Error(Errc::invalid_argument, "--classes is required");
  const Checkpoint ck = load_checkpoint(opts.checkpoint);
  const Manifest m = read_manifest(opts.manifest, opts.classes);
  const int n_classes = static_cast<int>(m.classes.size());
  check_checkpoint_fits(ck, n_classes);

  std::vector<const ManifestEntry*> entries;
  std::vector<std::string> splits;
  std::optional<FoldPlan> plan;
  if (opts.folds.fold >= 0) {
    std::vector<ManifestEntry> originals;
    for (const auto& e : m.entries)
      if (!e.soft_label) originals.push_back(e);
    plan = make_folds(originals, opts.folds.n_folds, opts.folds.group_key, opts.seed);
  }
  for (const auto& e : m.entries) {
    if (e.soft_label) continue;
    entries.push_back(&e);
    splits.push_back(!plan ? "all" : plan->fold_of(e) == opts.folds.fold ? "test" : "train");
  }
  int feature_dim = ck.config.feature_dim;
  const Dataset data = load_dataset(entries, n_classes, feature_dim);
  dump_embeddings(data, splits, m.classes, ck.params, ck.config, opts.out);
}

// ---------------------------------------------------------------------------

namespace {

Eigen::MatrixXd random_matrix(Eigen::Index rows, Eigen::Index cols, Rng& rng, double scale = 1.0) {
  std::normal_distribution<double> dist(0.0, scale);
  Eigen::MatrixXd m(rows, cols);
  for (Eigen::Index r = 0; r < rows; ++r)
    for (Eigen::Index c = 0; c < cols; ++c) m(r, c) = dist(rng);
  return m;
}

Eigen::VectorXd random_simplex(Eigen::Index n, Rng& rng) {
  std::uniform_real_distribution<double> dist(0.2, 1.0);
  Eigen::VectorXd v(n);
  for (Eigen::Index i = 0; i < n; ++i) v[i] = dist(rng);
  return v / v.sum();
}

template <typename M>
std::span<double> flat(M& m) {
  return {m.data(), static_cast<std::size_t>(m.size())};
}

template <typename M>
std::span<const double> cflat(const M& m) {
  return {m.data(), static_cast<std::size_t>(m.size())};
}

}  // namespace

std::vector<GradCheckReport> run_gradchecks(const GradcheckOptions& o) {
  if (o.frames < 2 || o.dim < 1 || o.heads < 1 || o.batch < 2 || o.proj_dim < 1 || o.n_classes < 2)
    throw Error(Errc::invalid_argument, "gradcheck sizes too small");
  if (o.dim % o.heads != 0)
    throw Error(Errc::invalid_argument, "feature dimension must be divisible by the head count");

  Rng rng(o.seed);
  const double h = o.step;
  const double tol = o.tolerance;
  const Eigen::Index t = o.frames, d = o.dim, p = o.proj_dim, k = o.n_classes;
  std::vector<GradCheckReport> reports;

  auto check_all = [&](const std::string& name, auto&& loss, auto& tensors, const auto& grads) {
    GradCheckReport total;
    total.name = name;
    total.tolerance = tol;
    for (std::size_t i = 0; i < tensors.size(); ++i)
      total.merge(grad_check(loss, tensors[i], grads[i], h, tol));
    reports.push_back(total);
  };

  // Linear layer, probed with a random linear functional of its output.
  {
    Eigen::MatrixXd x = random_matrix(t, d, rng);
    Linear<double> lin{random_matrix(d, p, rng, 0.3), random_matrix(p, 1, rng).col(0)};
    const Eigen::MatrixXd probe = random_matrix(t, p, rng);
    auto loss = [&] { return (linear_forward(x, lin).array() * probe.array()).sum(); };
    auto g = linear_backward(x, lin, probe);
    std::vector<std::span<double>> ts{flat(lin.weight), flat(lin.bias), flat(x)};
    std::vector<std::span<const double>> gs{cflat(g.params.weight), cflat(g.params.bias), cflat(g.input)};
    check_all("linear", loss, ts, gs);
  }

  // Residual multi-head self-attention.
  {
    Eigen::MatrixXd x = random_matrix(t, d, rng);
    MsaParams<double> msa = init_msa<double>(d, o.heads, rng);
    msa.bq = random_matrix(d, 1, rng, 0.1).col(0);
    msa.bv = random_matrix(d, 1, rng, 0.1).col(0);
    msa.bo = random_matrix(d, 1, rng, 0.1).col(0);
    const Eigen::MatrixXd probe = random_matrix(t, d, rng);
    auto loss = [&] { return (msa_forward(x, msa).array() * probe.array()).sum(); };
    MsaCache<double> cache;
    msa_forward(x, msa, &cache);
    auto g = msa_backward(cache, msa, probe);
    std::vector<std::span<double>> ts{flat(msa.wq), flat(msa.bq), flat(msa.wk), flat(msa.wv),
                                      flat(msa.bv), flat(msa.wo), flat(msa.bo), flat(x)};
    std::vector<std::span<const double>> gs{cflat(g.params.wq), cflat(g.params.bq), cflat(g.params.wk),
                                            cflat(g.params.wv), cflat(g.params.bv), cflat(g.params.wo),
                                            cflat(g.params.bo), cflat(g.input)};
    check_all("msa", loss, ts, gs);
  }

  // Frame-attention pooling, literal and softmax-normalized.
  for (bool normalize : {false, true}) {
    Eigen::MatrixXd x = random_matrix(t, d, rng);
    PoolParams<double> pool{random_matrix(d, 1, rng, 0.3).col(0), 0.1};
    const Eigen::VectorXd probe = random_matrix(d, 1, rng).col(0);
    auto loss = [&] { return frame_attention_pool(x, pool, normalize).dot(probe); };
    auto g = frame_attention_pool_backward(x, pool, normalize, probe);
    std::vector<std::span<double>> ts{flat(pool.weight), flat(x)};
    std::vector<std::span<const double>> gs{cflat(g.params.weight), cflat(g.input)};
    // Under softmax the bias derivative is identically zero; only the literal
    // form has a bias worth checking.
    if (!normalize) {
      ts.emplace_back(&pool.bias, 1);
      gs.emplace_back(&g.params.bias, 1);
    }
    check_all(normalize ? "frame_attention_pool_softmax" : "frame_attention_pool", loss, ts, gs);
  }

  // KL and focal with respect to the predicted distribution.
  {
    const Eigen::VectorXd y = random_simplex(k, rng);
    Eigen::VectorXd y_hat = random_simplex(k, rng);
    auto kl_loss = [&] { return kl_div(y, y_hat).value; };
    const Eigen::VectorXd kl_grad = kl_div(y, y_hat).grad;
    std::vector<std::span<double>> ts{flat(y_hat)};
    std::vector<std::span<const double>> kl_gs{cflat(kl_grad)};
    check_all("kl_div", kl_loss, ts, kl_gs);

    auto focal_loss = [&] { return focal(y, y_hat, 2.0).value; };
    const Eigen::VectorXd focal_grad = focal(y, y_hat, 2.0).grad;
    std::vector<std::span<const double>> fl_gs{cflat(focal_grad)};
    check_all("focal", focal_loss, ts, fl_gs);
  }

  // Center loss with respect to features and centers.
  {
    Eigen::MatrixXd f = random_matrix(o.batch, p, rng);
    Eigen::MatrixXd centers = random_matrix(k, p, rng);
    std::vector<int> labels(static_cast<std::size_t>(o.batch));
    for (int i = 0; i < o.batch; ++i) labels[static_cast<std::size_t>(i)] = i % o.n_classes;
    auto loss = [&] { return center_loss<double>(f, labels, centers).value; };
    auto g = center_loss<double>(f, labels, centers);
    std::vector<std::span<double>> ts{flat(f), flat(centers)};
    std::vector<std::span<const double>> gs{cflat(g.grad_features), cflat(g.grad_centers)};
    check_all("center", loss, ts, gs);
  }

  // Context broadcast.
  {
    Eigen::MatrixXd x = random_matrix(t, p, rng);
    const Eigen::MatrixXd probe = random_matrix(t, p, rng);
    auto loss = [&] { return (context_broadcast(x).array() * probe.array()).sum(); };
    const Eigen::MatrixXd g = context_broadcast_backward(probe);
    std::vector<std::span<double>> ts{flat(x)};
    std::vector<std::span<const double>> gs{cflat(g)};
    check_all("context_broadcast", loss, ts, gs);
  }

  // SupCon, normalized and raw embeddings.
  for (bool normalize : {true, false}) {
    Eigen::MatrixXd z = random_matrix(o.batch * t, p, rng, normalize ? 1.0 : 0.3);
    std::vector<int> labels(static_cast<std::size_t>(z.rows()));
    for (Eigen::Index i = 0; i < z.rows(); ++i)
      labels[static_cast<std::size_t>(i)] = static_cast<int>((i / t) % 2);
    const double tau = normalize ? 0.5 : 1.0;
    auto loss = [&] { return supcon<double>(z, labels, tau, normalize).value; };
    const Eigen::MatrixXd g = supcon<double>(z, labels, tau, normalize).grad;
    std::vector<std::span<double>> ts{flat(z)};
    std::vector<std::span<const double>> gs{cflat(g)};
    check_all(normalize ? "supcon" : "supcon_raw", loss, ts, gs);
  }

  // Full objective through every parameter, in two model variants.
  for (int variant = 0; variant < 2; ++variant) {
    ModelConfig cfg;
    cfg.feature_dim = o.dim;
    cfg.heads = o.heads;
    cfg.proj_dim = o.proj_dim;
    cfg.n_classes = o.n_classes;
    cfg.pool_softmax = variant == 1;
    cfg.shared_frame_projection = variant == 1;
    cfg.context_broadcast = variant == 0;
    LossConfig loss_cfg;
    loss_cfg.tau = 0.5;
    loss_cfg.lambdas = {1.0, 0.5, 0.1, 0.2};
    loss_cfg.normalize_embeddings = variant == 0;

    ModelParams<double> params = init_model<double>(cfg, rng);
    params.centers = random_matrix(cfg.n_classes, cfg.proj_dim, rng, 0.5);
    if (variant == 1) params.pool.weight *= 0.1;
    std::vector<Eigen::MatrixXd> inputs;
    std::vector<Eigen::VectorXd> targets;
    for (int b = 0; b < o.batch; ++b) {
      inputs.push_back(random_matrix(t, d, rng, variant == 0 ? 0.5 : 1.0));
      Eigen::VectorXd y = Eigen::VectorXd::Zero(k);
      y[b % 2] = 0.8;
      y[(b % 2 + 1) % k] = 0.2;
      targets.push_back(y);
    }
    auto loss = [&] { return total_loss<double>(inputs, targets, params, cfg, loss_cfg); };
    const ModelParams<double> grad = total_loss_gradient<double>(inputs, targets, params, cfg, loss_cfg);
    std::vector<std::span<double>> ts;
    std::vector<std::span<const double>> gs;
    for_each_tensor([&](auto pt, auto gt) {
      if (cfg.pool_softmax && pt.data() == &params.pool.bias) return;
      ts.push_back(pt);
      gs.push_back(std::span<const double>(gt.data(), gt.size()));
    }, params, grad);
    check_all(variant == 0 ? "composite" : "composite_softmax_pool_shared_proj", loss, ts, gs);
  }

  return reports;
}

std::string to_json(const std::vector<GradCheckReport>& reports) {
  ordered_json out = ordered_json::array();
  for (const auto& r : reports)
    out.push_back({{"kernel", r.name},
                   {"coordinates", r.coordinates},
                   {"max_rel_error", r.max_rel_error},
                   {"tolerance", r.tolerance},
                   {"passed", r.passed()}});
  return out.dump(2);
}

}  // namespace eamser
