#pragma once

#include <atomic>
#include <cmath>
#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <mutex>
#include <optional>
#include <sstream>
#include <string>
#include <thread>
#include <vector>

#include "json.hpp"

#include "sortnet/data.hpp"
#include "sortnet/fusion.hpp"
#include "sortnet/netspec.hpp"
#include "sortnet/network.hpp"
#include "sortnet/train.hpp"

namespace sortnet {

/// Everything needed to reproduce a run: network, data selection, schedule
/// and seeds. Serialized verbatim as the run's config echo.
struct ExperimentConfig {
  std::string net = "lenet";  // lenet | resnet | vggish | mlp | branch_mlp | linear | file
  std::string net_file;
  bool star = false;
  bool sort = false;
  std::size_t width = 1;
  std::size_t blocks = 3;
  std::size_t depth = 10;
  std::size_t hidden = 16;
  std::string fusion;  // term override for every block, e.g. "sum+prod"; empty keeps the builder's

  std::string data = "cifar10";  // cifar10 | blobs | xor
  std::string data_dir;          // empty: $SORTNET_DATA_DIR
  std::size_t subset = 0;        // 0 keeps the whole training split
  std::size_t test_subset = 0;
  std::size_t synthetic_n = 400;
  std::uint64_t data_seed = 0;
  bool standardize = true;

  std::vector<LrSection> sections;  // empty: the network's default schedule
  double scale = 1.0;
  std::size_t batch_size = 100;
  double momentum = 0.9;
  double weight_decay = 1e-4;
  std::size_t eval_every = 0;
  bool augment = false;

  std::vector<std::uint64_t> seeds{1};
  bool allow_diverge = false;
  std::size_t jobs = 1;

  friend bool operator==(const ExperimentConfig&, const ExperimentConfig&) = default;
};

inline nlohmann::json to_json(const ExperimentConfig& c) {
  nlohmann::json sections = nlohmann::json::array();
  for (const auto& s : c.sections) sections.push_back({{"lr", s.lr}, {"iters", s.iters}});
  return {{"net", c.net},
          {"net_file", c.net_file},
          {"star", c.star},
          {"sort", c.sort},
          {"width", c.width},
          {"blocks", c.blocks},
          {"depth", c.depth},
          {"hidden", c.hidden},
          {"fusion", c.fusion},
          {"data", c.data},
          {"data_dir", c.data_dir},
          {"subset", c.subset},
          {"test_subset", c.test_subset},
          {"synthetic_n", c.synthetic_n},
          {"data_seed", c.data_seed},
          {"standardize", c.standardize},
          {"sections", sections},
          {"scale", c.scale},
          {"batch_size", c.batch_size},
          {"momentum", c.momentum},
          {"weight_decay", c.weight_decay},
          {"eval_every", c.eval_every},
          {"augment", c.augment},
          {"seeds", c.seeds},
          {"allow_diverge", c.allow_diverge},
          {"jobs", c.jobs}};
}

/// Overwrites the fields present in `j`; absent keys keep their value.
inline void merge_json(ExperimentConfig& c, const nlohmann::json& j) {
  try {
    auto take = [&j](const char* key, auto& field) {
      if (j.contains(key)) field = j.at(key).get<std::decay_t<decltype(field)>>();
    };
    take("net", c.net);
    take("net_file", c.net_file);
    take("star", c.star);
    take("sort", c.sort);
    take("width", c.width);
    take("blocks", c.blocks);
    take("depth", c.depth);
    take("hidden", c.hidden);
    take("fusion", c.fusion);
    take("data", c.data);
    take("data_dir", c.data_dir);
    take("subset", c.subset);
    take("test_subset", c.test_subset);
    take("synthetic_n", c.synthetic_n);
    take("data_seed", c.data_seed);
    take("standardize", c.standardize);
    if (j.contains("sections")) {
      c.sections.clear();
      for (const auto& s : j.at("sections")) c.sections.push_back({s.at("lr").get<double>(), s.at("iters").get<std::size_t>()});
    }
    take("scale", c.scale);
    take("batch_size", c.batch_size);
    take("momentum", c.momentum);
    take("weight_decay", c.weight_decay);
    take("eval_every", c.eval_every);
    take("augment", c.augment);
    take("seeds", c.seeds);
    take("allow_diverge", c.allow_diverge);
    take("jobs", c.jobs);
  } catch (const nlohmann::json::exception& e) {
    throw Error(ErrorKind::InvalidConfig, std::string("experiment config: ") + e.what());
  }
}

inline ExperimentConfig load_experiment_config(const std::string& path, ExperimentConfig base = {}) {
  std::ifstream is(path);
  if (!is) throw Error(ErrorKind::IoError, "cannot open " + path);
  try {
    merge_json(base, nlohmann::json::parse(is));
  } catch (const nlohmann::json::parse_error& e) {
    throw Error(ErrorKind::InvalidConfig, path + ": " + e.what());
  }
  return base;
}

/// "0.01:60000,0.001:5000" -> sections.
inline std::vector<LrSection> parse_sections(const std::string& text) {
  std::vector<LrSection> out;
  std::stringstream ss(text);
  std::string item;
  while (std::getline(ss, item, ',')) {
    const auto colon = item.find(':');
    if (colon == std::string::npos) throw Error(ErrorKind::InvalidConfig, "section '" + item + "' is not lr:iters");
    try {
      std::size_t used = 0;
      const double lr = std::stod(item.substr(0, colon), &used);
      const long long iters = std::stoll(item.substr(colon + 1));
      if (iters <= 0 || lr < 0.0) throw std::invalid_argument("range");
      out.push_back({lr, static_cast<std::size_t>(iters)});
    } catch (const std::exception&) {
      throw Error(ErrorKind::InvalidConfig, "section '" + item + "' is not lr:iters");
    }
  }
  if (out.empty()) throw Error(ErrorKind::InvalidConfig, "no LR sections given");
  return out;
}

inline std::vector<std::uint64_t> parse_seeds(const std::string& text) {
  std::vector<std::uint64_t> out;
  std::stringstream ss(text);
  std::string item;
  while (std::getline(ss, item, ',')) {
    try {
      out.push_back(std::stoull(item));
    } catch (const std::exception&) {
      throw Error(ErrorKind::InvalidConfig, "seed '" + item + "' is not an integer");
    }
  }
  if (out.empty()) throw Error(ErrorKind::InvalidConfig, "no seeds given");
  return out;
}

/// Published schedules; desk runs shrink them with `scale`.
inline std::vector<LrSection> default_sections(const std::string& net) {
  if (net == "lenet") return {{1e-2, 60000}, {1e-3, 5000}, {1e-4, 5000}};
  if (net == "vggish") return {{1e-1, 60000}, {1e-2, 30000}, {1e-3, 20000}, {1e-4, 10000}};
  if (net == "resnet") return {{1e-1, 32000}, {1e-2, 16000}, {1e-3, 16000}};
  return {{1e-2, 1000}};
}

inline bool is_synthetic(const std::string& data) { return data == "blobs" || data == "xor"; }

inline NetworkSpec resolve_network(const ExperimentConfig& c) {
  NetworkSpec net;
  if (c.net == "lenet") {
    net = build_lenet(c.star, c.sort);
  } else if (c.net == "resnet") {
    net = build_resnet(c.blocks, c.width, c.sort);
  } else if (c.net == "vggish") {
    net = build_vggish(c.depth, c.star, c.sort);
  } else if (c.net == "mlp") {
    net = build_mlp(2, c.hidden, 2);
  } else if (c.net == "branch_mlp") {
    net = build_branch_mlp(2, c.hidden, 2, c.sort ? FusionSpec::sort_branched() : FusionSpec::linear());
  } else if (c.net == "linear") {
    net = build_linear(2, 2);
  } else if (c.net == "file") {
    net = load_network(c.net_file);
  } else {
    throw Error(ErrorKind::InvalidConfig, "unknown network '" + c.net + "'");
  }
  if (!c.fusion.empty()) {
    const FusionSpec base = has_residual_blocks(net.layers) ? FusionSpec::residual_sort() : FusionSpec::sort_branched();
    set_fusion(net.layers, base.with_terms(c.fusion));
    net.name += "[" + c.fusion + "]";
  }
  validate(net);
  return net;
}

inline TrainConfig resolve_train(const ExperimentConfig& c, std::uint64_t seed) {
  TrainConfig t;
  t.sections = scale_sections(c.sections.empty() ? default_sections(c.net) : c.sections, c.scale);
  t.batch_size = c.batch_size;
  t.momentum = c.momentum;
  t.weight_decay = c.weight_decay;
  t.seed = seed;
  t.eval_every = c.eval_every;
  t.augment = c.augment;
  t.validate();
  return t;
}

struct Splits {
  DatasetHandle train;
  DatasetHandle test;
  std::string note;  // preprocessing summary for the run report
};

inline std::filesystem::path data_root(const ExperimentConfig& c) {
  if (!c.data_dir.empty()) return c.data_dir;
  if (const char* env = std::getenv("SORTNET_DATA_DIR")) return env;
  throw Error(ErrorKind::IoError, "set SORTNET_DATA_DIR or --data-dir to the CIFAR-10 binary directory");
}

inline Splits load_splits(const ExperimentConfig& c) {
  Splits s;
  if (c.data == "cifar10") {
    Cifar10 cifar = load_cifar10_dir(data_root(c));
    s.train = c.subset ? subset(cifar.train, c.subset, c.data_seed) : std::move(cifar.train);
    s.test = c.test_subset ? subset(cifar.test, c.test_subset, derive_seed(c.data_seed, 1)) : std::move(cifar.test);
  } else if (is_synthetic(c.data)) {
    const auto kind = c.data == "blobs" ? SyntheticKind::Blobs : SyntheticKind::Xor;
    s.train = make_synthetic(kind, c.synthetic_n, c.data_seed);
    s.test = make_synthetic(kind, std::max<std::size_t>(2, c.synthetic_n / 2), derive_seed(c.data_seed, 99));
    s.test.split = "test";
  } else {
    throw Error(ErrorKind::InvalidConfig, "unknown dataset '" + c.data + "'");
  }
  if (c.standardize) {
    const ChannelStats stats = compute_channel_stats(s.train);
    s.train = standardize(s.train, stats);
    s.test = standardize(s.test, stats);
    s.note = "per-channel standardization with training-split statistics";
  } else {
    s.note = "no standardization";
  }
  return s;
}

struct RunOutcome {
  std::uint64_t seed = 0;
  RunMetrics metrics;
  bool diverged = false;
  std::string failure;  // empty on success
  double test_error = NAN;
};

inline RunOutcome run_seed(const ExperimentConfig& c, const NetworkSpec& spec, const Splits& data, std::uint64_t seed) {
  RunOutcome out;
  out.seed = seed;
  try {
    Network net(spec, derive_seed(seed, 0));
    out.metrics = train(net, data.train, &data.test, resolve_train(c, seed));
    out.test_error = out.metrics.final_error("test").value_or(NAN);
  } catch (const DivergedLoss& e) {
    out.metrics = e.metrics;
    out.diverged = true;
    out.failure = e.what();
  } catch (const Error& e) {
    out.diverged = e.kind() == ErrorKind::NonFiniteGradient;
    out.failure = e.what();
  }
  return out;
}

/// Runs `tasks` jobs with at most `jobs` threads; each task owns its output.
template <typename Fn>
void run_parallel(std::size_t tasks, std::size_t jobs, Fn&& fn) {
  jobs = std::clamp<std::size_t>(jobs, 1, std::max<std::size_t>(1, tasks));
  if (jobs == 1) {
    for (std::size_t i = 0; i < tasks; ++i) fn(i);
    return;
  }
  std::atomic<std::size_t> next{0};
  std::vector<std::jthread> workers;
  for (std::size_t w = 0; w < jobs; ++w) {
    workers.emplace_back([&] {
      for (std::size_t i = next++; i < tasks; i = next++) fn(i);
    });
  }
}

struct Summary {
  double mean = NAN;
  double stddev = NAN;
  std::size_t finished = 0;
};

inline Summary summarize(const std::vector<RunOutcome>& runs) {
  Summary s;
  std::vector<double> errs;
  for (const auto& r : runs) {
    if (r.failure.empty() && std::isfinite(r.test_error)) errs.push_back(r.test_error);
  }
  s.finished = errs.size();
  if (errs.empty()) return s;
  double sum = 0.0;
  for (double e : errs) sum += e;
  s.mean = sum / static_cast<double>(errs.size());
  double ss = 0.0;
  for (double e : errs) ss += (e - s.mean) * (e - s.mean);
  s.stddev = errs.size() > 1 ? std::sqrt(ss / static_cast<double>(errs.size() - 1)) : 0.0;
  return s;
}

struct ExperimentResult {
  NetworkSpec network;
  std::vector<RunOutcome> runs;
  Summary summary;
  std::string data_note;

  bool any_diverged() const {
    return std::any_of(runs.begin(), runs.end(), [](const RunOutcome& r) { return !r.failure.empty(); });
  }
};

inline ExperimentResult run_experiment(const ExperimentConfig& c, const Splits& data) {
  ExperimentResult res;
  res.network = resolve_network(c);
  resolve_train(c, 0);
  check_compatible(Network(res.network, 0), data.train);
  res.data_note = data.note;
  res.runs.resize(c.seeds.size());
  run_parallel(c.seeds.size(), c.jobs, [&](std::size_t i) { res.runs[i] = run_seed(c, res.network, data, c.seeds[i]); });
  res.summary = summarize(res.runs);
  return res;
}

inline std::string format_summary(const ExperimentConfig& c, const ExperimentResult& r) {
  std::ostringstream os;
  char buf[256];
  os << "network: " << r.network.name << " (" << count_params(r.network) << " parameters)\n";
  os << "data: " << c.data << (c.subset ? " subset " + std::to_string(c.subset) : std::string()) << ", "
     << r.data_note << "\n";
  for (const auto& run : r.runs) {
    if (run.failure.empty()) {
      std::snprintf(buf, sizeof buf, "seed %llu: test error %.2f%%, %.3f s / 20 iters\n",
                    static_cast<unsigned long long>(run.seed), run.test_error, run.metrics.seconds_per_20_iters());
    } else {
      std::snprintf(buf, sizeof buf, "seed %llu: %s\n", static_cast<unsigned long long>(run.seed),
                    run.failure.c_str());
    }
    os << buf;
  }
  if (r.summary.finished > 0) {
    std::snprintf(buf, sizeof buf, "test error: %.2f ± %.2f %% over %zu run(s)\n", r.summary.mean,
                  r.summary.stddev, r.summary.finished);
  } else {
    std::snprintf(buf, sizeof buf, "test error: − (no run converged)\n");
  }
  os << buf;
  return os.str();
}

/// Writes run_seed<S>.csv per seed, summary.txt and config.json into `dir`.
inline void write_experiment(const std::filesystem::path& dir, const ExperimentConfig& c, const ExperimentResult& r) {
  std::filesystem::create_directories(dir);
  for (const auto& run : r.runs) {
    write_metrics_csv((dir / ("run_seed" + std::to_string(run.seed) + ".csv")).string(), run.metrics);
  }
  std::ofstream summary(dir / "summary.txt");
  summary << format_summary(c, r);
  std::ofstream config(dir / "config.json");
  config << to_json(c).dump(2) << '\n';
  if (!summary || !config) throw Error(ErrorKind::IoError, "cannot write results to " + dir.string());
}

// ---------------------------------------------------------------------------
// Fusion ablation grid
// ---------------------------------------------------------------------------

struct AblationRow {
  FusionSpec fusion;
  ExperimentConfig config;
  ExperimentResult result;

  bool diverged() const { return result.any_diverged(); }
};

struct AblationReport {
  std::vector<AblationRow> rows;

  // Index of the worst row: any diverged row, else the highest mean error.
  std::size_t worst_row() const {
    std::size_t worst = 0;
    double worst_err = -1.0;
    for (std::size_t i = 0; i < rows.size(); ++i) {
      const double e = rows[i].diverged() ? INFINITY : rows[i].result.summary.mean;
      if (e > worst_err) {
        worst_err = e;
        worst = i;
      }
    }
    return worst;
  }
};

/// The seven fusion-term subsets under identical data, seeds and schedule.
/// A row with any failed seed is reported as diverged; the grid continues.
inline AblationReport run_ablation(const ExperimentConfig& base, const Splits& data) {
  const NetworkSpec probe = resolve_network(base);
  const FusionSpec product =
      has_residual_blocks(probe.layers) ? FusionSpec::residual_sort() : FusionSpec::sort_branched();
  AblationReport report;
  for (const auto& spec : ablation_rows(product)) {
    AblationRow row;
    row.fusion = spec;
    row.config = base;
    row.config.fusion = spec.terms();
    report.rows.push_back(std::move(row));
  }
  for (auto& row : report.rows) row.result = run_experiment(row.config, data);
  return report;
}

inline std::string format_ablation(const AblationReport& report) {
  std::ostringstream os;
  os << "  +   max  prod|  error (%)        | per seed\n";
  char buf[128];
  for (const auto& row : report.rows) {
    os << (row.fusion.use_sum ? "  x " : "    ") << (row.fusion.use_max ? "  x  " : "     ")
       << (row.fusion.use_prod ? "  x  " : "     ") << " | ";
    if (row.diverged()) {
      os << "  −              ";
    } else {
      std::snprintf(buf, sizeof buf, "%6.2f ± %-6.2f  ", row.result.summary.mean, row.result.summary.stddev);
      os << buf;
    }
    os << " |";
    for (const auto& run : row.result.runs) {
      if (run.failure.empty()) {
        std::snprintf(buf, sizeof buf, " %.2f", run.test_error);
        os << buf;
      } else {
        os << " −";
      }
    }
    os << '\n';
  }
  return os.str();
}

inline void write_ablation(const std::filesystem::path& dir, const AblationReport& report) {
  std::filesystem::create_directories(dir);
  for (std::size_t i = 0; i < report.rows.size(); ++i) {
    const auto& row = report.rows[i];
    write_experiment(dir / ("row" + std::to_string(i + 1) + "_" + row.fusion.terms()), row.config, row.result);
  }
  std::ofstream os(dir / "ablation.txt");
  os << format_ablation(report);
  if (!os) throw Error(ErrorKind::IoError, "cannot write " + (dir / "ablation.txt").string());
}

}  // namespace sortnet
