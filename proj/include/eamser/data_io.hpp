#pragma once

#include <cstdint>
#include <filesystem>
#include <map>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include <Eigen/Core>

#include "eamser/model.hpp"
#include "eamser/trainer.hpp"

namespace eamser {

// ---------------------------------------------------------------------------
// Manifests: JSON lines, one utterance per line.
//
//   {"id": "...", "label": "ang", "speaker": "...", "session": "...",
//    "audio_path": "...", "feature_path": "...",
//    "soft_label": [..], "mixup": "eam"}
//
// At least one of audio_path / feature_path is required. soft_label and mixup
// are written by the augment command for mixed utterances. Relative paths are
// resolved against the manifest's directory.

struct ManifestEntry {
  std::string id;
  std::optional<std::filesystem::path> audio_path;
  std::optional<std::filesystem::path> feature_path;
  std::string label;
  int label_index = -1;
  std::string speaker;
  std::string session;
  std::optional<Eigen::VectorXd> soft_label;
  std::optional<std::string> mixup;
  std::size_t line = 0;
};

struct Manifest {
  std::vector<std::string> classes;
  std::vector<ManifestEntry> entries;
};

/// Parses and validates a manifest. When `classes` is empty the class list is
/// the sorted set of labels present.
Manifest read_manifest(const std::filesystem::path& path,
                       const std::vector<std::string>& classes = {});

std::string to_json_line(const ManifestEntry& e);

// ---------------------------------------------------------------------------
// Feature files: "EAMF", u32 version (1), u32 T, u32 D, then T*D float32,
// row-major; all little-endian.

inline constexpr std::uint32_t kFeatureVersion = 1;

using FeatureMatrix = Eigen::Matrix<float, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

FeatureMatrix read_features(const std::filesystem::path& path);
void write_features(const std::filesystem::path& path, const FeatureMatrix& x);

// ---------------------------------------------------------------------------
// Cross-validation folds grouped by speaker or session.

enum class GroupKey { session, speaker };

GroupKey parse_group_key(const std::string& s);
const char* to_string(GroupKey k) noexcept;

struct FoldPlan {
  int n_folds = 0;
  GroupKey group_key = GroupKey::session;
  std::map<std::string, int> assignment;  // id -> fold
  std::map<std::string, int> group_fold;  // group value -> fold

  int fold_of(const ManifestEntry& e) const;
};

const std::string& group_of(const ManifestEntry& e, GroupKey key);

/// Seeded shuffle of the groups, then largest-first greedy placement into the
/// currently smallest fold.
FoldPlan make_folds(std::span<const ManifestEntry> entries, int n_folds, GroupKey key,
                    unsigned long long seed);

// ---------------------------------------------------------------------------

/// Loads an entry's feature file into a training example. Entries with a
/// soft_label use it as the target; others get a one-hot target.
Example load_example(const ManifestEntry& e, int n_classes);

/// CSV: id,label,split,e0..e{P-1} holding f_low per utterance.
void dump_embeddings(const Dataset& data, std::span<const std::string> splits,
                     std::span<const std::string> class_names, const ModelParams<double>& params,
                     const ModelConfig& cfg, const std::filesystem::path& path);

// ---------------------------------------------------------------------------
// Checkpoints: "EAMC", u32 version (1), u32 header words
//   feature_dim, heads, proj_dim, n_classes, aggregation, flags
// (flags: bit 0 pool softmax, bit 1 context broadcast, bit 2 shared frame
// projection), then every tensor as float32 in declaration order, each in
// column-major order; all little-endian.

inline constexpr std::uint32_t kCheckpointVersion = 1;

struct Checkpoint {
  ModelConfig config;
  ModelParams<double> params;
};

void save_checkpoint(const std::filesystem::path& path, const ModelConfig& cfg,
                     const ModelParams<double>& params);
Checkpoint load_checkpoint(const std::filesystem::path& path);

}  // namespace eamser
