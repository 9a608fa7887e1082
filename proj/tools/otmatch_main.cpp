// otmatch: experiment driver for the cross-modal matching library.
// Subcommands: gen-data | train | eval | gradcheck | sweep.
// Every run directory receives a fully resolved key=value config echo that
// can be fed back through --config to reproduce the run bit-for-bit.

#include <atomic>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <functional>
#include <iostream>
#include <sstream>
#include <string>
#include <thread>
#include <utility>
#include <vector>

#include "CLI11.hpp"
#include "json.hpp"

#include "otmatch/common.hpp"
#include "otmatch/data.hpp"
#include "otmatch/eval.hpp"
#include "otmatch/grad_engine.hpp"
#include "otmatch/ground_metric.hpp"
#include "otmatch/losses.hpp"
#include "otmatch/model.hpp"

namespace fs = std::filesystem;
using nlohmann::ordered_json;
using namespace otmatch;

namespace {

// ---- config-file plumbing ----------------------------------------------------

using ConfigEntries = std::vector<std::pair<std::string, std::string>>;

ConfigEntries read_config_file(const std::string& path) {
  std::ifstream in(path);
  if (!in.good()) {
    throw Error(ErrorKind::IoError, "cannot open config file: " + path);
  }
  ConfigEntries entries;
  std::string line;
  while (std::getline(in, line)) {
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (line.empty() || line.front() == '#') continue;
    const std::size_t eq = line.find('=');
    if (eq == std::string::npos || eq == 0) {
      throw Error(ErrorKind::FormatError, "config line is not key=value: " + line);
    }
    entries.emplace_back(line.substr(0, eq), line.substr(eq + 1));
  }
  return entries;
}

double parse_double(const std::string& s, const std::string& key) {
  try {
    std::size_t pos = 0;
    const double v = std::stod(s, &pos);
    if (pos != s.size()) throw std::invalid_argument(s);
    return v;
  } catch (const std::exception&) {
    throw Error(ErrorKind::FormatError, "config value for '" + key +
                                            "' is not a number: " + s);
  }
}

long long parse_int(const std::string& s, const std::string& key) {
  try {
    std::size_t pos = 0;
    const long long v = std::stoll(s, &pos);
    if (pos != s.size()) throw std::invalid_argument(s);
    return v;
  } catch (const std::exception&) {
    throw Error(ErrorKind::FormatError, "config value for '" + key +
                                            "' is not an integer: " + s);
  }
}

std::uint64_t parse_uint(const std::string& s, const std::string& key) {
  try {
    std::size_t pos = 0;
    const unsigned long long v = std::stoull(s, &pos);
    if (pos != s.size()) throw std::invalid_argument(s);
    return v;
  } catch (const std::exception&) {
    throw Error(ErrorKind::FormatError, "config value for '" + key +
                                            "' is not an unsigned integer: " + s);
  }
}

std::string format_double(double v) {
  std::ostringstream ss;
  ss.precision(17);
  ss << v;
  return ss.str();
}

// Binds config-file keys to flag targets; file values fill in only where the
// command line did not set the flag explicitly.
struct ConfigBinder {
  struct Entry {
    CLI::Option* opt;
    std::function<void(const std::string&)> set;
  };
  std::vector<std::pair<std::string, Entry>> entries;

  void add(const std::string& key, CLI::Option* opt,
           std::function<void(const std::string&)> set) {
    entries.emplace_back(key, Entry{opt, std::move(set)});
  }
  void apply(const ConfigEntries& from_file) const {
    for (const auto& [key, value] : from_file) {
      bool found = false;
      for (const auto& [name, entry] : entries) {
        if (name != key) continue;
        found = true;
        if (entry.opt == nullptr || entry.opt->count() == 0) entry.set(value);
        break;
      }
      if (!found) {
        throw Error(ErrorKind::FormatError, "unknown config key: " + key);
      }
    }
  }
};

// ---- shared training flags ------------------------------------------------------

struct TrainFlags {
  std::string config_path;
  std::string data;
  std::string out;
  std::string loss_name = "mltm";
  std::string metric_name = "mahalanobis";
  double epsilon = 0.05;
  double mass = 1.0;
  double temperature = 0.07;
  double margin = 0.2;
  long long batch_size = 256;
  int epochs = 30;
  double learning_rate = 1e-4;
  std::uint64_t seed = 0;
  long long embedding_dim = 8;
  long long hidden_dim = 64;
  // Training-time iteration cap: a few hundred iterations regularize as well
  // as full convergence here and run far faster; raise for solver-accuracy
  // studies.
  int sinkhorn_iters = 300;
  double sinkhorn_tol = 1e-6;
  double noise_ratio = 0.0;
  std::uint64_t noise_seed = 1;
};

losses::LossKind parse_loss_kind(const std::string& name) {
  if (name == "mltm") return losses::LossKind::MLTM;
  if (name == "mltm-pot") return losses::LossKind::MLTM_POT;
  if (name == "contrastive") return losses::LossKind::Contrastive;
  if (name == "triplet") return losses::LossKind::Triplet;
  throw Error(ErrorKind::InvalidArgument,
              "unknown loss '" + name +
                  "' (expected mltm|mltm-pot|contrastive|triplet)");
}

metric::MetricKind parse_metric_kind(const std::string& name) {
  if (name == "euclidean") return metric::MetricKind::Euclidean;
  if (name == "cosine") return metric::MetricKind::CosineDistance;
  if (name == "mahalanobis") return metric::MetricKind::Mahalanobis;
  throw Error(ErrorKind::InvalidArgument,
              "unknown metric '" + name +
                  "' (expected euclidean|cosine|mahalanobis)");
}

void add_train_flags(CLI::App* cmd, TrainFlags& f, ConfigBinder& binder) {
  CLI::Option* o;
  o = cmd->add_option("--config", f.config_path,
                      "key=value config file; explicit flags override it");
  o = cmd->add_option("--data", f.data, "dataset manifest path");
  binder.add("data", o, [&f](const std::string& v) { f.data = v; });
  o = cmd->add_option("--loss", f.loss_name,
                      "mltm | mltm-pot | contrastive | triplet");
  binder.add("loss", o, [&f](const std::string& v) { f.loss_name = v; });
  o = cmd->add_option("--metric", f.metric_name,
                      "euclidean | cosine | mahalanobis");
  binder.add("metric", o, [&f](const std::string& v) { f.metric_name = v; });
  o = cmd->add_option("--epsilon", f.epsilon, "Sinkhorn regularization (> 0)")
          ->check(CLI::PositiveNumber);
  binder.add("epsilon", o,
             [&f](const std::string& v) { f.epsilon = parse_double(v, "epsilon"); });
  o = cmd->add_option("--mass", f.mass, "transported mass s in (0,1]");
  binder.add("mass", o,
             [&f](const std::string& v) { f.mass = parse_double(v, "mass"); });
  o = cmd->add_option("--temperature", f.temperature, "contrastive temperature");
  binder.add("temperature", o, [&f](const std::string& v) {
    f.temperature = parse_double(v, "temperature");
  });
  o = cmd->add_option("--margin", f.margin, "triplet margin");
  binder.add("margin", o,
             [&f](const std::string& v) { f.margin = parse_double(v, "margin"); });
  o = cmd->add_option("--batch-size", f.batch_size, "mini-batch size (>= 2)");
  binder.add("batch-size", o, [&f](const std::string& v) {
    f.batch_size = parse_int(v, "batch-size");
  });
  o = cmd->add_option("--epochs", f.epochs, "training epochs");
  binder.add("epochs", o, [&f](const std::string& v) {
    f.epochs = static_cast<int>(parse_int(v, "epochs"));
  });
  o = cmd->add_option("--lr", f.learning_rate, "Adam learning rate");
  binder.add("lr", o, [&f](const std::string& v) {
    f.learning_rate = parse_double(v, "lr");
  });
  o = cmd->add_option("--seed", f.seed, "training seed");
  binder.add("seed", o,
             [&f](const std::string& v) { f.seed = parse_uint(v, "seed"); });
  o = cmd->add_option("--embedding-dim", f.embedding_dim, "shared embedding dim");
  binder.add("embedding-dim", o, [&f](const std::string& v) {
    f.embedding_dim = parse_int(v, "embedding-dim");
  });
  o = cmd->add_option("--hidden-dim", f.hidden_dim, "encoder hidden width");
  binder.add("hidden-dim", o, [&f](const std::string& v) {
    f.hidden_dim = parse_int(v, "hidden-dim");
  });
  o = cmd->add_option("--sinkhorn-iters", f.sinkhorn_iters,
                      "training-time solver iteration cap");
  binder.add("sinkhorn-iters", o, [&f](const std::string& v) {
    f.sinkhorn_iters = static_cast<int>(parse_int(v, "sinkhorn-iters"));
  });
  o = cmd->add_option("--sinkhorn-tol", f.sinkhorn_tol,
                      "solver marginal tolerance");
  binder.add("sinkhorn-tol", o, [&f](const std::string& v) {
    f.sinkhorn_tol = parse_double(v, "sinkhorn-tol");
  });
  o = cmd->add_option("--noise-ratio", f.noise_ratio,
                      "fraction of training pairs to corrupt before training");
  binder.add("noise-ratio", o, [&f](const std::string& v) {
    f.noise_ratio = parse_double(v, "noise-ratio");
  });
  o = cmd->add_option("--noise-seed", f.noise_seed, "corruption shuffle seed");
  binder.add("noise-seed", o, [&f](const std::string& v) {
    f.noise_seed = parse_uint(v, "noise-seed");
  });
}

model::TrainConfig to_train_config(const TrainFlags& f) {
  model::TrainConfig cfg;
  cfg.loss.kind = parse_loss_kind(f.loss_name);
  cfg.loss.epsilon = f.epsilon;
  cfg.loss.mass = f.mass;
  cfg.loss.temperature = f.temperature;
  cfg.loss.margin = f.margin;
  cfg.loss.sinkhorn_max_iters = f.sinkhorn_iters;
  cfg.loss.sinkhorn_tolerance = f.sinkhorn_tol;
  cfg.metric = parse_metric_kind(f.metric_name);
  cfg.batch_size = static_cast<Eigen::Index>(f.batch_size);
  cfg.epochs = f.epochs;
  cfg.learning_rate = f.learning_rate;
  cfg.seed = f.seed;
  cfg.embedding_dim = static_cast<Eigen::Index>(f.embedding_dim);
  cfg.hidden_dim = static_cast<Eigen::Index>(f.hidden_dim);
  return cfg;
}

void write_config_echo(const std::string& path, const TrainFlags& f) {
  std::ofstream out(path, std::ios::trunc);
  require(out.good(), ErrorKind::IoError, "cannot write config echo: " + path);
  out << "data=" << fs::absolute(f.data).string() << "\n";
  out << "loss=" << f.loss_name << "\n";
  out << "metric=" << f.metric_name << "\n";
  out << "epsilon=" << format_double(f.epsilon) << "\n";
  out << "mass=" << format_double(f.mass) << "\n";
  out << "temperature=" << format_double(f.temperature) << "\n";
  out << "margin=" << format_double(f.margin) << "\n";
  out << "batch-size=" << f.batch_size << "\n";
  out << "epochs=" << f.epochs << "\n";
  out << "lr=" << format_double(f.learning_rate) << "\n";
  out << "seed=" << f.seed << "\n";
  out << "embedding-dim=" << f.embedding_dim << "\n";
  out << "hidden-dim=" << f.hidden_dim << "\n";
  out << "sinkhorn-iters=" << f.sinkhorn_iters << "\n";
  out << "sinkhorn-tol=" << format_double(f.sinkhorn_tol) << "\n";
  out << "noise-ratio=" << format_double(f.noise_ratio) << "\n";
  out << "noise-seed=" << f.noise_seed << "\n";
  out.flush();
  require(out.good(), ErrorKind::IoError, "config echo write failed: " + path);
}

ordered_json report_to_json(const eval::RetrievalReport& rep) {
  ordered_json j;
  j["r1_a2t"] = rep.r1_a2t;
  j["r5_a2t"] = rep.r5_a2t;
  j["r10_a2t"] = rep.r10_a2t;
  j["r1_t2a"] = rep.r1_t2a;
  j["r5_t2a"] = rep.r5_t2a;
  j["r10_t2a"] = rep.r10_t2a;
  j["avg_r1"] = rep.avg_r1();
  j["modality_gap"] = rep.modality_gap;
  return j;
}

struct RunOutputs {
  model::Checkpoint checkpoint;
  std::vector<model::EpochRecord> history;
  eval::RetrievalReport report;
};

// Executes one training run into `out_dir`: config echo, metrics.jsonl,
// checkpoint.mltm, report.json.
RunOutputs run_training(const TrainFlags& flags) {
  require(!flags.data.empty(), ErrorKind::InvalidArgument,
          "--data (or a config file providing it) is required");
  require(!flags.out.empty(), ErrorKind::InvalidArgument, "--out is required");
  std::error_code ec;
  fs::create_directories(flags.out, ec);
  require(!ec, ErrorKind::IoError, "cannot create run directory: " + flags.out);

  write_config_echo((fs::path(flags.out) / "config.txt").string(), flags);

  data::DatasetBundle bundle = data::load_dataset(flags.data);
  if (flags.noise_ratio > 0.0) {
    bundle.train = data::inject_noise(bundle.train, flags.noise_ratio,
                                      flags.noise_seed);
  }
  const model::TrainConfig cfg = to_train_config(flags);
  auto [ckpt, history] =
      model::train(bundle.train, cfg,
                   bundle.test.has_value() ? &*bundle.test : nullptr);

  std::ofstream metrics((fs::path(flags.out) / "metrics.jsonl").string(),
                        std::ios::trunc);
  require(metrics.good(), ErrorKind::IoError, "cannot write metrics.jsonl");
  for (const model::EpochRecord& rec : history) {
    ordered_json j;
    j["epoch"] = rec.epoch;
    j["train_loss"] = rec.train_loss;
    j["val_r1_t2a"] = rec.val_r1_t2a;
    j["val_r1_a2t"] = rec.val_r1_a2t;
    j["modality_gap"] = rec.modality_gap;
    metrics << j.dump() << "\n";
  }
  metrics.flush();
  require(metrics.good(), ErrorKind::IoError, "metrics.jsonl write failed");

  model::save_checkpoint(ckpt,
                         (fs::path(flags.out) / "checkpoint.mltm").string());

  const data::PairedDataset& eval_split =
      bundle.test.has_value() ? *bundle.test : bundle.train;
  RunOutputs outputs;
  outputs.report = eval::evaluate_checkpoint(ckpt, eval_split);
  std::ofstream report_file((fs::path(flags.out) / "report.json").string(),
                            std::ios::trunc);
  require(report_file.good(), ErrorKind::IoError, "cannot write report.json");
  report_file << report_to_json(outputs.report).dump(2) << "\n";
  report_file.flush();
  require(report_file.good(), ErrorKind::IoError, "report.json write failed");

  outputs.checkpoint = std::move(ckpt);
  outputs.history = std::move(history);
  return outputs;
}

// ---- subcommands ------------------------------------------------------------------

int cmd_gen_data(const std::string& out_dir, long long n, long long latent,
                 long long dx, long long dy, double sigma, std::uint64_t seed,
                 long long n_test, double noise_ratio, std::uint64_t noise_seed) {
  data::SynthSpec spec;
  spec.n = static_cast<Eigen::Index>(n);
  spec.latent_dim = static_cast<Eigen::Index>(latent);
  spec.dx = static_cast<Eigen::Index>(dx);
  spec.dy = static_cast<Eigen::Index>(dy);
  spec.noise_sigma = sigma;
  spec.seed = seed;
  data::SynthSplit split =
      data::generate_synthetic_split(spec, static_cast<Eigen::Index>(n_test));
  if (noise_ratio > 0.0) {
    split.train = data::inject_noise(split.train, noise_ratio, noise_seed);
  }
  const std::string manifest = data::save_dataset(
      out_dir, split.train, split.test.count() > 0 ? &split.test : nullptr,
      &spec, noise_ratio > 0.0);
  std::cout << "wrote dataset (" << split.train.count() << " train"
            << (split.test.count() > 0
                    ? ", " + std::to_string(split.test.count()) + " test"
                    : std::string{})
            << " pairs); manifest: " << manifest << "\n";
  return 0;
}

int cmd_train(const TrainFlags& flags) {
  const RunOutputs outputs = run_training(flags);
  double final_loss = 0.0;
  if (!outputs.history.empty()) final_loss = outputs.history.back().train_loss;
  std::cout << "trained " << outputs.history.size()
            << " epochs; final train_loss=" << format_double(final_loss)
            << "; eval avg R@1=" << outputs.report.avg_r1()
            << " (a2t=" << outputs.report.r1_a2t
            << ", t2a=" << outputs.report.r1_t2a << ")\n"
            << "outputs in " << flags.out << "\n";
  return 0;
}

int cmd_eval(const std::string& ckpt_path, const std::string& manifest,
             const std::string& csv_path) {
  const model::Checkpoint ckpt = model::load_checkpoint(ckpt_path);
  const data::DatasetBundle bundle = data::load_dataset(manifest);
  const data::PairedDataset& split =
      bundle.test.has_value() ? *bundle.test : bundle.train;
  const eval::RetrievalReport rep = eval::evaluate_checkpoint(ckpt, split);
  std::cout << report_to_json(rep).dump(2) << "\n";
  if (!csv_path.empty()) {
    const bool fresh = !fs::exists(csv_path) || fs::file_size(csv_path) == 0;
    std::ofstream csv(csv_path, std::ios::app);
    require(csv.good(), ErrorKind::IoError, "cannot open CSV: " + csv_path);
    if (fresh) csv << "checkpoint,r1_t2a,r1_a2t,avg_r1,modality_gap\n";
    csv << ckpt_path << ',' << rep.r1_t2a << ',' << rep.r1_a2t << ','
        << rep.avg_r1() << ',' << format_double(rep.modality_gap) << "\n";
    csv.flush();
    require(csv.good(), ErrorKind::IoError, "CSV write failed: " + csv_path);
  }
  return 0;
}

int cmd_gradcheck(long long d, int coords, double h, std::uint64_t seed,
                  double pot_mass) {
  if (h < 1e-7 || h > 1e-3) {
    const double clamped = std::min(std::max(h, 1e-7), 1e-3);
    std::cerr << "warning: step size " << h
              << " outside [1e-7, 1e-3]; clamping to " << clamped << "\n";
    h = clamped;
  }
  const std::vector<metric::MetricKind> metrics = {
      metric::MetricKind::Euclidean, metric::MetricKind::Mahalanobis};
  const std::vector<double> masses = {1.0, pot_mass};  // full, then partial
  const std::vector<double> epsilons = {0.05, 0.1, 0.5};
  const std::vector<Eigen::Index> batch_sizes = {2, 4, 8};

  bool all_ok = true;
  std::uint64_t instance = 0;
  for (const auto mk : metrics) {
    for (const double mass : masses) {
      for (const double eps : epsilons) {
        for (const Eigen::Index b : batch_sizes) {
          ++instance;
          Rng rng(seed + instance);
          grad::MltmPoint point;
          point.za.resize(b, d);
          point.zb.resize(b, d);
          rng.fill_gaussian(point.za, 0.0, 1.0);
          rng.fill_gaussian(point.zb, 0.0, 1.0);
          point.metric = mk;
          if (mk == metric::MetricKind::Mahalanobis) {
            point.M = metric::init_interaction(static_cast<Eigen::Index>(d),
                                               seed + 1000 + instance)
                          .M;
          }
          point.epsilon = eps;
          point.mass = mass;
          point.base_config = ot::SinkhornConfig{eps, 2000, 1e-6};
          const double err = grad::finite_diff_check(point, coords, h, seed);
          const bool ok = err < 1e-4;
          all_ok = all_ok && ok;
          std::cout << "metric="
                    << (mk == metric::MetricKind::Euclidean ? "euclidean"
                                                            : "mahalanobis")
                    << " loss=" << (mass < 1.0 ? "mltm-pot" : "mltm")
                    << " eps=" << eps << " b=" << b
                    << " max_rel_err=" << format_double(err) << ' '
                    << (ok ? "PASS" : "FAIL") << "\n";
        }
      }
    }
  }
  std::cout << (all_ok ? "gradcheck: all configurations passed"
                       : "gradcheck: FAILURES above")
            << "\n";
  return all_ok ? 0 : 1;
}

int cmd_sweep(const TrainFlags& base, const std::string& axis,
              const std::string& values_csv, int jobs) {
  require(axis == "epsilon" || axis == "mass" || axis == "noise-ratio",
          ErrorKind::InvalidArgument,
          "sweep axis must be epsilon | mass | noise-ratio");
  std::vector<std::string> values;
  {
    std::istringstream ss(values_csv);
    std::string item;
    while (std::getline(ss, item, ',')) {
      if (!item.empty()) values.push_back(item);
    }
  }
  require(!values.empty(), ErrorKind::InvalidArgument,
          "--values must list at least one value");
  require(jobs >= 1, ErrorKind::InvalidArgument, "--jobs must be positive");
  require(!base.out.empty(), ErrorKind::InvalidArgument, "--out is required");
  std::error_code ec;
  fs::create_directories(base.out, ec);
  require(!ec, ErrorKind::IoError, "cannot create sweep directory: " + base.out);

  struct Row {
    std::string value;
    bool ok = false;
    eval::RetrievalReport report;
    std::string error;
  };
  std::vector<Row> rows(values.size());
  std::atomic<std::size_t> next{0};

  const auto worker = [&]() {
    for (;;) {
      const std::size_t idx = next.fetch_add(1);
      if (idx >= values.size()) return;
      Row& row = rows[idx];
      row.value = values[idx];
      try {
        TrainFlags flags = base;
        const double v = parse_double(values[idx], axis);
        if (axis == "epsilon") {
          flags.epsilon = v;
        } else if (axis == "mass") {
          flags.mass = v;
        } else {
          flags.noise_ratio = v;
        }
        flags.out =
            (fs::path(base.out) / ("run_" + axis + "_" + values[idx])).string();
        row.report = run_training(flags).report;
        row.ok = true;
      } catch (const std::exception& e) {
        row.error = e.what();
      }
    }
  };

  const int thread_count =
      std::min<std::size_t>(static_cast<std::size_t>(jobs), values.size());
  if (thread_count <= 1) {
    worker();
  } else {
    std::vector<std::thread> pool;
    pool.reserve(static_cast<std::size_t>(thread_count));
    for (int t = 0; t < thread_count; ++t) pool.emplace_back(worker);
    for (std::thread& t : pool) t.join();
  }

  const std::string csv_path = (fs::path(base.out) / "sweep.csv").string();
  std::ofstream csv(csv_path, std::ios::trunc);
  require(csv.good(), ErrorKind::IoError, "cannot write sweep CSV: " + csv_path);
  csv << "value,r1_t2a,r1_a2t,avg_r1,modality_gap,status\n";
  for (const Row& row : rows) {
    if (row.ok) {
      csv << row.value << ',' << row.report.r1_t2a << ',' << row.report.r1_a2t
          << ',' << row.report.avg_r1() << ','
          << format_double(row.report.modality_gap) << ",ok\n";
    } else {
      std::string msg = row.error;
      for (char& ch : msg) {
        if (ch == ',' || ch == '\n') ch = ';';
      }
      csv << row.value << ",,,,," << "error: " << msg << "\n";
    }
  }
  csv.flush();
  require(csv.good(), ErrorKind::IoError, "sweep CSV write failed");
  std::cout << "sweep complete; results in " << csv_path << "\n";
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"cross-modal matching experiments"};
  app.require_subcommand(1);

  // gen-data
  auto* gen = app.add_subcommand("gen-data", "generate a synthetic dataset");
  long long gen_n = 0, gen_latent = 8, gen_dx = 32, gen_dy = 48;
  long long gen_n_test = 0;
  double gen_sigma = 0.1, gen_noise_ratio = 0.0;
  std::uint64_t gen_seed = 0, gen_noise_seed = 1;
  std::string gen_out = ".";
  gen->add_option("--n", gen_n, "training pairs (>= 4)")
      ->required()
      ->check(CLI::Range(4LL, 100000000LL));
  gen->add_option("--latent", gen_latent, "shared latent dimension")
      ->check(CLI::PositiveNumber);
  gen->add_option("--dx", gen_dx, "modality-X dimension")
      ->check(CLI::PositiveNumber);
  gen->add_option("--dy", gen_dy, "modality-Y dimension")
      ->check(CLI::PositiveNumber);
  gen->add_option("--sigma", gen_sigma, "observation noise scale")
      ->check(CLI::NonNegativeNumber);
  gen->add_option("--seed", gen_seed, "generator seed");
  gen->add_option("--n-test", gen_n_test, "held-out test pairs")
      ->check(CLI::NonNegativeNumber);
  gen->add_option("--noise-ratio", gen_noise_ratio,
                  "fraction of train pairs to corrupt");
  gen->add_option("--noise-seed", gen_noise_seed, "corruption shuffle seed");
  gen->add_option("--out", gen_out, "output directory (default .)");

  // train
  auto* train_cmd = app.add_subcommand("train", "train a matching model");
  TrainFlags train_flags;
  ConfigBinder train_binder;
  add_train_flags(train_cmd, train_flags, train_binder);
  train_cmd->add_option("--out", train_flags.out, "run output directory");

  // eval
  auto* eval_cmd = app.add_subcommand("eval", "evaluate a checkpoint");
  std::string eval_ckpt, eval_data, eval_csv;
  eval_cmd->add_option("--ckpt", eval_ckpt, "checkpoint path")->required();
  eval_cmd->add_option("--data", eval_data, "dataset manifest path")->required();
  eval_cmd->add_option("--csv", eval_csv, "append a result row to this CSV");

  // gradcheck
  auto* gc = app.add_subcommand(
      "gradcheck", "finite-difference check of the matching-loss gradients");
  gc->set_help_flag("--help", "print help");  // frees -h so --h can be the step size
  long long gc_d = 3;
  int gc_coords = 50;
  double gc_h = 1e-5, gc_mass = 0.6;
  std::uint64_t gc_seed = 0;
  gc->add_option("--d", gc_d, "embedding dimension")->check(CLI::PositiveNumber);
  gc->add_option("--coords", gc_coords, "sampled coordinates per configuration")
      ->check(CLI::PositiveNumber);
  gc->add_option("--h", gc_h, "central-difference step (clamped to [1e-7,1e-3])");
  gc->add_option("--seed", gc_seed, "instance seed");
  gc->add_option("--mass", gc_mass, "partial-variant transported mass");

  // sweep
  auto* sweep_cmd =
      app.add_subcommand("sweep", "train/evaluate across one hyperparameter axis");
  TrainFlags sweep_flags;
  ConfigBinder sweep_binder;
  add_train_flags(sweep_cmd, sweep_flags, sweep_binder);
  std::string sweep_axis, sweep_values;
  int sweep_jobs = 0;
  sweep_cmd->add_option("--out", sweep_flags.out, "sweep output directory");
  sweep_cmd->add_option("--axis", sweep_axis, "epsilon | mass | noise-ratio")
      ->required();
  sweep_cmd->add_option("--values", sweep_values, "comma-separated value list")
      ->required();
  sweep_cmd->add_option("--jobs", sweep_jobs,
                        "concurrent runs (default: env OTMATCH_JOBS, else 1)");

  CLI11_PARSE(app, argc, argv);

  try {
    if (gen->parsed()) {
      return cmd_gen_data(gen_out, gen_n, gen_latent, gen_dx, gen_dy, gen_sigma,
                          gen_seed, gen_n_test, gen_noise_ratio, gen_noise_seed);
    }
    if (train_cmd->parsed()) {
      if (!train_flags.config_path.empty()) {
        train_binder.apply(read_config_file(train_flags.config_path));
      }
      return cmd_train(train_flags);
    }
    if (eval_cmd->parsed()) {
      return cmd_eval(eval_ckpt, eval_data, eval_csv);
    }
    if (gc->parsed()) {
      return cmd_gradcheck(gc_d, gc_coords, gc_h, gc_seed, gc_mass);
    }
    if (sweep_cmd->parsed()) {
      if (!sweep_flags.config_path.empty()) {
        sweep_binder.apply(read_config_file(sweep_flags.config_path));
      }
      int jobs = sweep_jobs;
      if (jobs <= 0) {
        jobs = 1;
        if (const char* env = std::getenv("OTMATCH_JOBS")) {
          try {
            jobs = std::max(1, static_cast<int>(std::stol(env)));
          } catch (const std::exception&) {
            jobs = 1;
          }
        }
      }
      return cmd_sweep(sweep_flags, sweep_axis, sweep_values, jobs);
    }
  } catch (const Error& e) {
    std::cerr << "error (" << error_kind_name(e.kind()) << "): " << e.what()
              << "\n";
    return 1;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
  return 0;
}
