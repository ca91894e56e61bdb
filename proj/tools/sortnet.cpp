#include <cstdio>
#include <filesystem>
#include <iostream>
#include <string>

#include "CLI11.hpp"

#include "sortnet/sortnet.hpp"

namespace {

using namespace sortnet;

constexpr int kOk = 0;
constexpr int kFailure = 1;
constexpr int kUsage = 2;

struct CommonFlags {
  std::string config_path;
  std::string sections;
  std::string seeds;
  std::string out = "runs";
};

void add_experiment_flags(CLI::App* cmd, ExperimentConfig& c, CommonFlags& f) {
  cmd->add_option("--net", c.net, "lenet | resnet | vggish | mlp | branch_mlp | linear | file")
      ->check(CLI::IsMember({"lenet", "resnet", "vggish", "mlp", "branch_mlp", "linear", "file"}));
  cmd->add_option("--net-file", c.net_file, "network description (JSON) when --net file");
  cmd->add_flag("--star", c.star, "replace conv layers by two-branch modules");
  cmd->add_flag("--sort", c.sort, "second-order fusion in every block");
  cmd->add_option("--width", c.width, "residual width multiplier");
  cmd->add_option("--blocks", c.blocks, "residual blocks per stage");
  cmd->add_option("--depth", c.depth, "vggish depth");
  cmd->add_option("--hidden", c.hidden, "hidden units for the synthetic MLPs");
  cmd->add_option("--fusion", c.fusion, "fusion terms for every block, e.g. sum+prod");
  cmd->add_option("--data", c.data, "cifar10 | blobs | xor")->check(CLI::IsMember({"cifar10", "blobs", "xor"}));
  cmd->add_option("--data-dir", c.data_dir, "CIFAR-10 binary directory (default $SORTNET_DATA_DIR)");
  cmd->add_option("--subset", c.subset, "training samples to keep (0 = all)");
  cmd->add_option("--test-subset", c.test_subset, "test samples to keep (0 = all)");
  cmd->add_option("--synthetic-n", c.synthetic_n, "synthetic training samples");
  cmd->add_option("--data-seed", c.data_seed, "seed for subsets and synthetic data");
  cmd->add_flag("--standardize,!--no-standardize", c.standardize, "per-channel standardization");
  cmd->add_option("--sections", f.sections, "LR sections lr:iters,lr:iters,...");
  cmd->add_option("--scale", c.scale, "multiply every section's iterations");
  cmd->add_option("--batch", c.batch_size, "mini-batch size");
  cmd->add_option("--momentum", c.momentum);
  cmd->add_option("--weight-decay", c.weight_decay);
  cmd->add_option("--eval-every", c.eval_every, "test evaluation period in iterations (0 = end only)");
  cmd->add_flag("--augment", c.augment, "pad-crop and flip augmentation");
  cmd->add_option("--seeds,--seed", f.seeds, "comma-separated seeds");
  cmd->add_flag("--allow-diverge", c.allow_diverge, "exit 0 even when a run diverges");
  cmd->add_option("--jobs", c.jobs, "concurrent runs");
  cmd->add_option("--out", f.out, "output directory");
  cmd->add_option("--config", f.config_path, "JSON config; its keys override flags");
}

ExperimentConfig finish_config(ExperimentConfig c, const CommonFlags& f) {
  if (!f.sections.empty()) c.sections = parse_sections(f.sections);
  if (!f.seeds.empty()) c.seeds = parse_seeds(f.seeds);
  if (!f.config_path.empty()) c = load_experiment_config(f.config_path, c);
  return c;
}

int cmd_train(const ExperimentConfig& c, const std::filesystem::path& out) {
  resolve_network(c);
  resolve_train(c, 0);
  const Splits data = load_splits(c);
  const ExperimentResult r = run_experiment(c, data);
  write_experiment(out, c, r);
  std::cout << format_summary(c, r);
  if (r.any_diverged() && !c.allow_diverge) {
    std::cerr << "error: at least one run diverged (use --allow-diverge to accept)\n";
    return kFailure;
  }
  return kOk;
}

int cmd_ablate(const ExperimentConfig& c, const std::filesystem::path& out) {
  resolve_network(c);
  resolve_train(c, 0);
  const Splits data = load_splits(c);
  const AblationReport report = run_ablation(c, data);
  write_ablation(out, report);
  std::cout << format_ablation(report);
  return kOk;
}

int cmd_gradcheck(const std::string& scope_name, std::size_t instances, std::uint64_t seed) {
  const AuditScope scope = scope_name == "fusion"   ? AuditScope::Fusion
                           : scope_name == "all-ops" ? AuditScope::AllOps
                                                     : AuditScope::FullNet;
  const AuditReport report = run_gradcheck(scope, instances, seed);
  char buf[256];
  for (const auto& op : report.ops) {
    std::snprintf(buf, sizeof buf, "%-44s %5zu instances  max rel err %.3e  %s\n", op.op.c_str(), op.instances,
                  op.max_rel_err, op.pass ? "ok" : "FAIL");
    std::cout << buf;
  }
  if (report.pass()) {
    std::cout << "gradcheck " << scope_name << ": pass (tol " << report.tol << ")\n";
    return kOk;
  }
  std::cout << "gradcheck " << scope_name << ": FAIL in";
  for (const auto& name : report.failing()) std::cout << ' ' << name;
  std::cout << '\n';
  return kFailure;
}

int cmd_bench(const BenchConfig& cfg) {
  const BenchResult r = bench_block(cfg);
  std::printf("block %s, %zu channels, %zux%zu, batch %zu, %zu reps\n",
              cfg.block == BenchBlock::Residual ? "residual" : "branch", cfg.channels, cfg.size, cfg.size, cfg.batch,
              r.reps);
  std::printf("base median %.4f s, sort median %.4f s\n", r.base_median_s, r.sort_median_s);
  std::printf("sort/base = %.3f\n", r.ratio);
  return kOk;
}

int cmd_surface(const std::filesystem::path& out, const GridSpec& grid) {
  std::filesystem::create_directories(out);
  write_surface_csv((out / "f1.csv").string(), nonlinearity_surface(SurfaceKind::LinearRelu, grid));
  write_surface_csv((out / "f2.csv").string(), nonlinearity_surface(SurfaceKind::SecondOrder, grid));
  std::cout << "wrote " << (out / "f1.csv").string() << " and " << (out / "f2.csv").string() << '\n';
  return kOk;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Two-branch and residual networks with second-order response fusion"};
  app.require_subcommand(1);

  ExperimentConfig train_cfg;
  CommonFlags train_flags;
  auto* train_cmd = app.add_subcommand("train", "train a network for each seed");
  add_experiment_flags(train_cmd, train_cfg, train_flags);

  ExperimentConfig ablate_cfg;
  ablate_cfg.net = "resnet";
  CommonFlags ablate_flags;
  ablate_flags.out = "ablation";
  auto* ablate_cmd = app.add_subcommand("ablate", "run the seven fusion-term subsets");
  add_experiment_flags(ablate_cmd, ablate_cfg, ablate_flags);

  std::string scope;
  std::size_t instances = 100;
  std::uint64_t audit_seed = 1;
  auto* grad_cmd = app.add_subcommand("gradcheck", "finite-difference audit of the backward passes");
  grad_cmd->add_option("scope", scope, "fusion | all-ops | full-net")
      ->required()
      ->check(CLI::IsMember({"fusion", "all-ops", "full-net"}));
  grad_cmd->add_option("--instances", instances, "random instances per op")->check(CLI::PositiveNumber);
  grad_cmd->add_option("--seed", audit_seed);

  BenchConfig bench;
  std::string block = "residual";
  auto* bench_cmd = app.add_subcommand("bench", "time a SORT block against its linear-sum twin");
  bench_cmd->add_option("block", block, "residual | branch")->check(CLI::IsMember({"residual", "branch"}));
  bench_cmd->add_option("--channels", bench.channels)->check(CLI::PositiveNumber);
  bench_cmd->add_option("--size", bench.size)->check(CLI::PositiveNumber);
  bench_cmd->add_option("--batch", bench.batch)->check(CLI::PositiveNumber);
  bench_cmd->add_option("--reps", bench.reps)->check(CLI::Range(30, 100000));
  bench_cmd->add_flag("--self", bench.self_compare, "bench the linear block against itself");
  bench_cmd->add_option("--seed", bench.seed);

  std::string surface_out = "surface";
  GridSpec grid;
  auto* surface_cmd = app.add_subcommand("surface", "write f1/f2 response surfaces as CSV");
  surface_cmd->add_option("--out", surface_out, "output directory");
  surface_cmd->add_option("--step", grid.step)->check(CLI::PositiveNumber);

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? kOk : kUsage;
  }

  try {
    if (*train_cmd) return cmd_train(finish_config(train_cfg, train_flags), train_flags.out);
    if (*ablate_cmd) return cmd_ablate(finish_config(ablate_cfg, ablate_flags), ablate_flags.out);
    if (*grad_cmd) return cmd_gradcheck(scope, instances, audit_seed);
    if (*bench_cmd) {
      bench.block = block == "branch" ? BenchBlock::Branch : BenchBlock::Residual;
      return cmd_bench(bench);
    }
    if (*surface_cmd) return cmd_surface(surface_out, grid);
  } catch (const Error& e) {
    std::cerr << "error: " << e.what() << '\n';
    const bool usage = e.kind() == ErrorKind::InvalidConfig || e.kind() == ErrorKind::ShapeMismatch ||
                       e.kind() == ErrorKind::EvenKernel || e.kind() == ErrorKind::InvalidGeometry;
    return usage ? kUsage : kFailure;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << '\n';
    return kFailure;
  }
  return kUsage;
}
