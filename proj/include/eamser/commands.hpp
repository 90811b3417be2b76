#pragma once

// Subcommand implementations behind the eamser CLI. Each takes a fully
// validated option struct and throws eamser::Error on failure.

#include <filesystem>
#include <iosfwd>
#include <string>
#include <vector>

#include <Eigen/Core>

#include "eamser/data_io.hpp"
#include "eamser/eam.hpp"
#include "eamser/gradcheck.hpp"
#include "eamser/signal.hpp"
#include "eamser/trainer.hpp"

namespace eamser {

/// Process exit status for an error code: 1 usage, 2 data, 3 numeric.
int exit_code_for(Errc code) noexcept;

inline constexpr int kExitOk = 0;
inline constexpr int kExitUsage = 1;
inline constexpr int kExitData = 2;
inline constexpr int kExitNumeric = 3;

std::vector<std::string> split_classes(const std::string& csv);

struct FoldOptions {
  int n_folds = 5;
  GroupKey group_key = GroupKey::session;
  // -1 disables the held-out fold.
  int fold = 0;
};

// ---------------------------------------------------------------------------

struct AugmentOptions {
  std::filesystem::path manifest;
  std::filesystem::path out_dir;
  std::vector<std::string> classes;
  MixConfig mix;
  MixupMode mixup = MixupMode::eam;
  int pairs = 0;
  unsigned long long seed = 0;
  FoldOptions folds;
};

struct AugmentSummary {
  int written = 0;
  int skipped = 0;
};

/// Writes mix_NNNNN.wav + mix_NNNNN.json per pair and an augmented.jsonl
/// manifest into out_dir. Pairs whose segments are silent or too short are
/// skipped and counted.
AugmentSummary run_augment(const AugmentOptions& opts, std::ostream& log);

// ---------------------------------------------------------------------------

struct TrainOptions {
  std::filesystem::path manifest;
  std::vector<std::string> classes;
  FoldOptions folds;
  TrainConfig train;
  std::filesystem::path out;
  std::filesystem::path log;  // defaults to <out>.log.jsonl
};

struct TrainSummary {
  ModelConfig config;
  std::vector<EpochRecord> records;
  std::size_t train_size = 0;
  std::size_t test_size = 0;
};

TrainSummary run_train(const TrainOptions& opts, std::ostream& log);

// ---------------------------------------------------------------------------

struct EvaluateOptions {
  std::filesystem::path checkpoint;
  std::filesystem::path manifest;
  std::vector<std::string> classes;
  FoldOptions folds;
  unsigned long long seed = 0;  // must match the training run's fold plan
  int threads = 1;
};

/// Returns {"wa", "ua", "n", "classes", "confusion", "predictions"} as JSON.
std::string run_evaluate(const EvaluateOptions& opts);

struct DumpOptions {
  std::filesystem::path checkpoint;
  std::filesystem::path manifest;
  std::vector<std::string> classes;
  FoldOptions folds;
  unsigned long long seed = 0;
  std::filesystem::path out;
};

void run_dump_embeddings(const DumpOptions& opts);

// ---------------------------------------------------------------------------

struct GradcheckOptions {
  unsigned long long seed = 0;
  int frames = 6;
  int dim = 32;
  int heads = 16;
  int batch = 4;
  int proj_dim = 8;
  int n_classes = 4;
  double step = 1e-5;
  double tolerance = 1e-4;
};

/// Checks every analytic backward pass against central differences on random
/// inputs: linear, MSA, frame-attention pooling (both modes), KL, focal,
/// center, context broadcast, SupCon and the full composite objective.
std::vector<GradCheckReport> run_gradchecks(const GradcheckOptions& opts);

std::string to_json(const std::vector<GradCheckReport>& reports);

}  // namespace eamser
