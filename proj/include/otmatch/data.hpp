#pragma once

// Synthetic paired-modality datasets, correspondence-noise injection, and the
// on-disk embedding format: "EMB1" binary grids (u32 row count, u32 dim,
// row-major little-endian f32), a plain-text key=value manifest tying the
// files of one dataset together, and an optional plain-text alignment
// sidecar (one true-partner row index per line).

#include <Eigen/Dense>

#include <cstdint>
#include <optional>
#include <string>
#include <utility>
#include <vector>

namespace otmatch::data {

struct SynthSpec {
  Eigen::Index n = 0;
  Eigen::Index latent_dim = 0;
  Eigen::Index dx = 0;
  Eigen::Index dy = 0;
  double noise_sigma = 0.0;
  std::uint64_t seed = 0;

  // n >= 4, all dims >= 1, noise_sigma >= 0 and finite.
  void validate() const;
};

// Aligned sample pairs. Row i of xs is paired with row alignment[i] of ys;
// a clean dataset has the identity alignment. corrupted_flags[i] is nonzero
// iff alignment[i] != i. Grids are stored in the file format's precision
// (f32) so that save/load round-trips are bit-exact.
struct PairedDataset {
  Eigen::MatrixXf xs, ys;
  std::vector<Eigen::Index> alignment;
  std::vector<std::uint8_t> corrupted_flags;
  // Synthetic generator maps (dx x latent, dy x latent), kept with the
  // dataset so evaluation splits drawn later share the same geometry.
  // Empty for datasets loaded from files.
  Eigen::MatrixXd map_x, map_y;

  Eigen::Index count() const { return xs.rows(); }
  Eigen::Index dim_x() const { return xs.cols(); }
  Eigen::Index dim_y() const { return ys.cols(); }
  std::size_t corrupted_count() const;
};

struct SynthSplit {
  PairedDataset train;
  PairedDataset test;  // empty (count 0) when no test rows were requested
};

// Shared-latent generator: latent z_i ~ N(0, I); x_i = A_x z_i + sigma * n_x,
// y_i = A_y z_i + sigma * n_y. Deterministic given the parameters.
PairedDataset generate_synthetic(const SynthSpec& spec);

// Same generative process with caller-provided maps (spec.dx/dy must match
// the map shapes). generate_synthetic draws Gaussian maps and delegates here.
PairedDataset synth_from_maps(const SynthSpec& spec, Eigen::MatrixXd a_x,
                              Eigen::MatrixXd a_y);

// Draws a train block of spec.n rows and a test block of n_test rows from
// one latent stream, sharing the generator maps, in one deterministic pass.
SynthSplit generate_synthetic_split(const SynthSpec& spec, Eigen::Index n_test);

// Selects floor(ratio * n) indices and derangement-shuffles their ys rows
// among themselves, so every selected pair ends up with a wrong partner;
// alignment and corrupted_flags are updated, other pairs are untouched.
// ratio must lie in [0, 1) and must not select exactly one index (no
// derangement of one element exists); both raise RatioOutOfRange.
PairedDataset inject_noise(const PairedDataset& ds, double ratio,
                           std::uint64_t seed);

// ---- EMB1 embedding files ---------------------------------------------------

void save_embedding_file(const std::string& path, const Eigen::MatrixXf& grid);
Eigen::MatrixXf load_embedding_file(const std::string& path);

// Pairs row i of path_x with row i of path_y (identity alignment).
// Raises LengthMismatch when the row counts differ.
PairedDataset load_embeddings(const std::string& path_x,
                              const std::string& path_y);

// ---- sidecars and manifests ---------------------------------------------------

void save_alignment_file(const std::string& path,
                         const std::vector<Eigen::Index>& alignment);
std::vector<Eigen::Index> load_alignment_file(const std::string& path);

using ManifestEntries = std::vector<std::pair<std::string, std::string>>;

void save_manifest(const std::string& path, const ManifestEntries& entries);
ManifestEntries load_manifest(const std::string& path);

// Writes a dataset directory: x.emb, y.emb, manifest.txt, plus
// test_x.emb/test_y.emb when a non-empty test split is given and
// alignment.txt when requested. The manifest records the file names and,
// when given, the synthesis parameters. Returns the manifest path.
std::string save_dataset(const std::string& dir, const PairedDataset& train,
                         const PairedDataset* test, const SynthSpec* spec,
                         bool write_alignment);

struct DatasetBundle {
  PairedDataset train;
  std::optional<PairedDataset> test;
  ManifestEntries manifest;
};

// Loads the dataset a manifest describes; file paths are resolved relative
// to the manifest's directory. Alignment sidecars are validated as
// permutations.
DatasetBundle load_dataset(const std::string& manifest_path);

}  // namespace otmatch::data
