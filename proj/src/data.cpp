#include "otmatch/data.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <numeric>
#include <sstream>

#include "otmatch/common.hpp"

namespace otmatch::data {

namespace {

constexpr char kMagic[4] = {'E', 'M', 'B', '1'};

void append_u32(std::string& buf, std::uint32_t v) {
  char bytes[4];
  bytes[0] = static_cast<char>(v & 0xff);
  bytes[1] = static_cast<char>((v >> 8) & 0xff);
  bytes[2] = static_cast<char>((v >> 16) & 0xff);
  bytes[3] = static_cast<char>((v >> 24) & 0xff);
  buf.append(bytes, 4);
}

std::uint32_t read_u32(const std::string& buf, std::size_t offset) {
  const auto b = [&](std::size_t i) {
    return static_cast<std::uint32_t>(static_cast<unsigned char>(buf[offset + i]));
  };
  return b(0) | (b(1) << 8) | (b(2) << 16) | (b(3) << 24);
}

std::string read_entire_file(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  require(in.good(), ErrorKind::IoError, "cannot open file: " + path);
  std::ostringstream ss;
  ss << in.rdbuf();
  require(!in.bad(), ErrorKind::IoError, "read failed: " + path);
  return std::move(ss).str();
}

void write_entire_file(const std::string& path, const std::string& bytes) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  require(out.good(), ErrorKind::IoError, "cannot open file for writing: " + path);
  out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
  out.flush();
  require(out.good(), ErrorKind::IoError, "write failed: " + path);
}

std::string format_double(double v) {
  std::ostringstream ss;
  ss.precision(17);
  ss << v;
  return ss.str();
}

}  // namespace

void SynthSpec::validate() const {
  require(n >= 4, ErrorKind::InvalidArgument, "synthetic n must be at least 4");
  require(latent_dim >= 1 && dx >= 1 && dy >= 1, ErrorKind::InvalidArgument,
          "synthetic dimensions must be at least 1");
  require(std::isfinite(noise_sigma) && noise_sigma >= 0.0,
          ErrorKind::InvalidArgument, "noise_sigma must be non-negative");
}

std::size_t PairedDataset::corrupted_count() const {
  std::size_t c = 0;
  for (const std::uint8_t f : corrupted_flags) c += (f != 0);
  return c;
}

namespace {

// Draws one block of paired samples from an already-seeded stream.
// Draw order per block: latents, x-noise, y-noise (each grid row-major).
PairedDataset draw_block(Rng& rng, const SynthSpec& spec, Eigen::Index rows,
                         const Eigen::MatrixXd& a_x, const Eigen::MatrixXd& a_y) {
  PairedDataset ds;
  ds.map_x = a_x;
  ds.map_y = a_y;
  if (rows == 0) return ds;
  Eigen::MatrixXd z(rows, spec.latent_dim);
  Eigen::MatrixXd nx(rows, spec.dx);
  Eigen::MatrixXd ny(rows, spec.dy);
  rng.fill_gaussian(z, 0.0, 1.0);
  rng.fill_gaussian(nx, 0.0, 1.0);
  rng.fill_gaussian(ny, 0.0, 1.0);
  const Eigen::MatrixXd xs = z * a_x.transpose() + spec.noise_sigma * nx;
  const Eigen::MatrixXd ys = z * a_y.transpose() + spec.noise_sigma * ny;
  ds.xs = xs.cast<float>();
  ds.ys = ys.cast<float>();
  ds.alignment.resize(static_cast<std::size_t>(rows));
  std::iota(ds.alignment.begin(), ds.alignment.end(), Eigen::Index{0});
  ds.corrupted_flags.assign(static_cast<std::size_t>(rows), 0);
  return ds;
}

}  // namespace

PairedDataset synth_from_maps(const SynthSpec& spec, Eigen::MatrixXd a_x,
                              Eigen::MatrixXd a_y) {
  spec.validate();
  require(a_x.rows() == spec.dx && a_x.cols() == spec.latent_dim &&
              a_y.rows() == spec.dy && a_y.cols() == spec.latent_dim,
          ErrorKind::DimensionMismatch,
          "generator map shapes must match the requested dimensions");
  Rng rng(spec.seed);
  return draw_block(rng, spec, spec.n, a_x, a_y);
}

SynthSplit generate_synthetic_split(const SynthSpec& spec, Eigen::Index n_test) {
  spec.validate();
  require(n_test >= 0, ErrorKind::InvalidArgument,
          "test row count must be non-negative");
  Rng rng(spec.seed);
  // Map entries scaled so generated coordinates have near-unit variance.
  const double scale = 1.0 / std::sqrt(static_cast<double>(spec.latent_dim));
  Eigen::MatrixXd a_x(spec.dx, spec.latent_dim);
  Eigen::MatrixXd a_y(spec.dy, spec.latent_dim);
  rng.fill_gaussian(a_x, 0.0, scale);
  rng.fill_gaussian(a_y, 0.0, scale);
  SynthSplit split;
  split.train = draw_block(rng, spec, spec.n, a_x, a_y);
  split.test = draw_block(rng, spec, n_test, a_x, a_y);
  return split;
}

PairedDataset generate_synthetic(const SynthSpec& spec) {
  return generate_synthetic_split(spec, 0).train;
}

PairedDataset inject_noise(const PairedDataset& ds, double ratio,
                           std::uint64_t seed) {
  require(std::isfinite(ratio) && ratio >= 0.0 && ratio < 1.0,
          ErrorKind::RatioOutOfRange, "noise ratio must lie in [0, 1)");
  const Eigen::Index n = ds.count();
  const auto m = static_cast<Eigen::Index>(
      std::floor(ratio * static_cast<double>(n)));
  PairedDataset out = ds;
  if (m == 0) return out;
  require(m >= 2, ErrorKind::RatioOutOfRange,
          "noise ratio selects a single pair, which cannot be deranged");

  Rng rng(seed);
  std::vector<Eigen::Index> indices(static_cast<std::size_t>(n));
  std::iota(indices.begin(), indices.end(), Eigen::Index{0});
  rng.shuffle(indices);
  std::vector<Eigen::Index> selected(indices.begin(), indices.begin() + m);
  std::sort(selected.begin(), selected.end());

  // Rejection-sample a derangement of the selected slots.
  std::vector<Eigen::Index> perm(static_cast<std::size_t>(m));
  std::iota(perm.begin(), perm.end(), Eigen::Index{0});
  for (;;) {
    rng.shuffle(perm);
    bool has_fixed_point = false;
    for (Eigen::Index k = 0; k < m; ++k) {
      if (perm[static_cast<std::size_t>(k)] == k) {
        has_fixed_point = true;
        break;
      }
    }
    if (!has_fixed_point) break;
  }

  // Row selected[perm[k]] of the current ys moves to row selected[k].
  std::vector<Eigen::Index> dest(static_cast<std::size_t>(n));
  std::iota(dest.begin(), dest.end(), Eigen::Index{0});
  for (Eigen::Index k = 0; k < m; ++k) {
    const Eigen::Index from = selected[static_cast<std::size_t>(
        perm[static_cast<std::size_t>(k)])];
    const Eigen::Index to = selected[static_cast<std::size_t>(k)];
    out.ys.row(to) = ds.ys.row(from);
    dest[static_cast<std::size_t>(from)] = to;
  }
  for (Eigen::Index i = 0; i < n; ++i) {
    const Eigen::Index old_row = ds.alignment[static_cast<std::size_t>(i)];
    const Eigen::Index new_row = dest[static_cast<std::size_t>(old_row)];
    out.alignment[static_cast<std::size_t>(i)] = new_row;
    out.corrupted_flags[static_cast<std::size_t>(i)] = (new_row != i) ? 1 : 0;
  }
  return out;
}

// ---- EMB1 files ------------------------------------------------------------------

void save_embedding_file(const std::string& path, const Eigen::MatrixXf& grid) {
  require(grid.rows() >= 0 && grid.cols() >= 1, ErrorKind::InvalidArgument,
          "embedding grid must have at least one column");
  std::string buf;
  buf.reserve(12 + static_cast<std::size_t>(grid.size()) * 4);
  buf.append(kMagic, 4);
  append_u32(buf, static_cast<std::uint32_t>(grid.rows()));
  append_u32(buf, static_cast<std::uint32_t>(grid.cols()));
  for (Eigen::Index i = 0; i < grid.rows(); ++i) {
    for (Eigen::Index j = 0; j < grid.cols(); ++j) {
      const float v = grid(i, j);
      char bytes[4];
      std::memcpy(bytes, &v, 4);
      buf.append(bytes, 4);
    }
  }
  write_entire_file(path, buf);
}

Eigen::MatrixXf load_embedding_file(const std::string& path) {
  const std::string buf = read_entire_file(path);
  require(buf.size() >= 12, ErrorKind::FormatError,
          "embedding file too short for its header: " + path);
  require(std::memcmp(buf.data(), kMagic, 4) == 0, ErrorKind::FormatError,
          "bad embedding file magic: " + path);
  const std::uint64_t rows = read_u32(buf, 4);
  const std::uint64_t dim = read_u32(buf, 8);
  require(dim >= 1, ErrorKind::FormatError,
          "embedding file declares zero dimension: " + path);
  const std::uint64_t expected = 12 + rows * dim * 4;
  require(buf.size() == expected, ErrorKind::FormatError,
          "embedding file size does not match its declared shape: " + path);
  Eigen::MatrixXf grid(static_cast<Eigen::Index>(rows),
                       static_cast<Eigen::Index>(dim));
  std::size_t off = 12;
  for (Eigen::Index i = 0; i < grid.rows(); ++i) {
    for (Eigen::Index j = 0; j < grid.cols(); ++j) {
      float v;
      std::memcpy(&v, buf.data() + off, 4);
      grid(i, j) = v;
      off += 4;
    }
  }
  return grid;
}

PairedDataset load_embeddings(const std::string& path_x,
                              const std::string& path_y) {
  PairedDataset ds;
  ds.xs = load_embedding_file(path_x);
  ds.ys = load_embedding_file(path_y);
  require(ds.xs.rows() == ds.ys.rows(), ErrorKind::LengthMismatch,
          "paired embedding files have different row counts");
  ds.alignment.resize(static_cast<std::size_t>(ds.xs.rows()));
  std::iota(ds.alignment.begin(), ds.alignment.end(), Eigen::Index{0});
  ds.corrupted_flags.assign(static_cast<std::size_t>(ds.xs.rows()), 0);
  return ds;
}

// ---- sidecars ---------------------------------------------------------------------

void save_alignment_file(const std::string& path,
                         const std::vector<Eigen::Index>& alignment) {
  std::string buf;
  for (const Eigen::Index a : alignment) {
    buf += std::to_string(a);
    buf += '\n';
  }
  write_entire_file(path, buf);
}

std::vector<Eigen::Index> load_alignment_file(const std::string& path) {
  const std::string buf = read_entire_file(path);
  std::vector<Eigen::Index> out;
  std::istringstream ss(buf);
  std::string line;
  while (std::getline(ss, line)) {
    if (line.empty()) continue;
    try {
      std::size_t pos = 0;
      const long long v = std::stoll(line, &pos);
      require(pos == line.size() && v >= 0, ErrorKind::FormatError,
              "alignment file line is not a non-negative integer: " + line);
      out.push_back(static_cast<Eigen::Index>(v));
    } catch (const Error&) {
      throw;
    } catch (const std::exception&) {
      throw Error(ErrorKind::FormatError,
                  "alignment file line is not an integer: " + line);
    }
  }
  return out;
}

void save_manifest(const std::string& path, const ManifestEntries& entries) {
  std::string buf;
  for (const auto& [key, value] : entries) {
    require(key.find('=') == std::string::npos &&
                key.find('\n') == std::string::npos &&
                value.find('\n') == std::string::npos,
            ErrorKind::InvalidArgument, "manifest keys/values must be single-line");
    buf += key;
    buf += '=';
    buf += value;
    buf += '\n';
  }
  write_entire_file(path, buf);
}

ManifestEntries load_manifest(const std::string& path) {
  const std::string buf = read_entire_file(path);
  ManifestEntries entries;
  std::istringstream ss(buf);
  std::string line;
  while (std::getline(ss, line)) {
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (line.empty()) continue;
    const std::size_t eq = line.find('=');
    require(eq != std::string::npos && eq > 0, ErrorKind::FormatError,
            "manifest line is not key=value: " + line);
    entries.emplace_back(line.substr(0, eq), line.substr(eq + 1));
  }
  return entries;
}

std::string save_dataset(const std::string& dir, const PairedDataset& train,
                         const PairedDataset* test, const SynthSpec* spec,
                         bool write_alignment) {
  namespace fs = std::filesystem;
  std::error_code ec;
  fs::create_directories(dir, ec);
  require(!ec, ErrorKind::IoError, "cannot create dataset directory: " + dir);

  const fs::path base(dir);
  save_embedding_file((base / "x.emb").string(), train.xs);
  save_embedding_file((base / "y.emb").string(), train.ys);

  ManifestEntries entries;
  entries.emplace_back("x", "x.emb");
  entries.emplace_back("y", "y.emb");
  const bool has_test = test != nullptr && test->count() > 0;
  if (has_test) {
    save_embedding_file((base / "test_x.emb").string(), test->xs);
    save_embedding_file((base / "test_y.emb").string(), test->ys);
    entries.emplace_back("test_x", "test_x.emb");
    entries.emplace_back("test_y", "test_y.emb");
  }
  if (write_alignment) {
    save_alignment_file((base / "alignment.txt").string(), train.alignment);
    entries.emplace_back("alignment", "alignment.txt");
  }
  if (spec != nullptr) {
    entries.emplace_back("n", std::to_string(spec->n));
    entries.emplace_back("latent_dim", std::to_string(spec->latent_dim));
    entries.emplace_back("dx", std::to_string(spec->dx));
    entries.emplace_back("dy", std::to_string(spec->dy));
    entries.emplace_back("noise_sigma", format_double(spec->noise_sigma));
    entries.emplace_back("seed", std::to_string(spec->seed));
  }
  const std::string manifest_path = (base / "manifest.txt").string();
  save_manifest(manifest_path, entries);
  return manifest_path;
}

namespace {

const std::string* find_entry(const ManifestEntries& entries,
                              const std::string& key) {
  for (const auto& [k, v] : entries) {
    if (k == key) return &v;
  }
  return nullptr;
}

}  // namespace

DatasetBundle load_dataset(const std::string& manifest_path) {
  namespace fs = std::filesystem;
  DatasetBundle bundle;
  bundle.manifest = load_manifest(manifest_path);
  const fs::path base = fs::path(manifest_path).parent_path();
  const auto resolve = [&](const std::string& rel) {
    return (base / rel).string();
  };

  const std::string* x_file = find_entry(bundle.manifest, "x");
  const std::string* y_file = find_entry(bundle.manifest, "y");
  require(x_file != nullptr && y_file != nullptr, ErrorKind::FormatError,
          "manifest must name both an x and a y embedding file");
  bundle.train = load_embeddings(resolve(*x_file), resolve(*y_file));

  if (const std::string* align_file = find_entry(bundle.manifest, "alignment")) {
    auto alignment = load_alignment_file(resolve(*align_file));
    const Eigen::Index n = bundle.train.count();
    require(static_cast<Eigen::Index>(alignment.size()) == n,
            ErrorKind::LengthMismatch,
            "alignment sidecar length does not match the dataset");
    std::vector<std::uint8_t> seen(static_cast<std::size_t>(n), 0);
    for (const Eigen::Index a : alignment) {
      require(a >= 0 && a < n && !seen[static_cast<std::size_t>(a)],
              ErrorKind::FormatError,
              "alignment sidecar is not a permutation of the row indices");
      seen[static_cast<std::size_t>(a)] = 1;
    }
    bundle.train.alignment = std::move(alignment);
    for (Eigen::Index i = 0; i < n; ++i) {
      bundle.train.corrupted_flags[static_cast<std::size_t>(i)] =
          (bundle.train.alignment[static_cast<std::size_t>(i)] != i) ? 1 : 0;
    }
  }

  const std::string* tx = find_entry(bundle.manifest, "test_x");
  const std::string* ty = find_entry(bundle.manifest, "test_y");
  require((tx == nullptr) == (ty == nullptr), ErrorKind::FormatError,
          "manifest names only one half of the test split");
  if (tx != nullptr) {
    bundle.test = load_embeddings(resolve(*tx), resolve(*ty));
  }
  return bundle;
}

}  // namespace otmatch::data
