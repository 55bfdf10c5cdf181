// mimdit: data generation, training, restoration, ablation and routing reports.
#include <filesystem>
#include <iostream>
#include <optional>
#include <string>

#include <CLI11.hpp>

#include "mimdit/checkpoint.hpp"
#include "mimdit/errors.hpp"
#include "mimdit/experiment.hpp"
#include "mimdit/gradcheck.hpp"
#include "mimdit/text.hpp"

namespace fs = std::filesystem;
using namespace mimdit;

namespace {

struct CommonOptions {
  std::string config_path;
  std::optional<std::uint64_t> seed;
  std::string out = ".";
};

void add_common(CLI::App* cmd, CommonOptions& o) {
  cmd->add_option("--config", o.config_path, "Experiment config file (INI with sections)");
  cmd->add_option("--seed", o.seed, "Overrides experiment.seed");
  cmd->add_option("--out", o.out, "Output directory")->capture_default_str();
}

ExperimentConfig resolve_config(const CommonOptions& o) {
  ExperimentConfig c = o.config_path.empty() ? ExperimentConfig{} : load_config(o.config_path);
  if (o.seed) c.seed = *o.seed;
  c.validate();
  return c;
}

std::string prepare_out(const CommonOptions& o) {
  std::error_code ec;
  fs::create_directories(o.out, ec);
  if (ec) throw PersistenceError(o.out, "cannot create output directory: " + ec.message());
  return o.out;
}

std::string join(const std::string& dir, const std::string& name) {
  return (fs::path(dir) / name).string();
}

void export_images(const std::string& dir, const std::string& stem,
                   const std::vector<Tensor>& images, std::size_t limit) {
  for (std::size_t i = 0; i < std::min(limit, images.size()); ++i) {
    const char* ext = images[i].extent(0) == 1 ? ".pgm" : ".ppm";
    write_netpbm(join(dir, stem + "_" + std::to_string(i) + ext), images[i]);
  }
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Mixture-in-mixture diffusion transformer toolkit"};
  app.require_subcommand(1);

  CommonOptions gen_opts, train_opts, restore_opts, ablate_opts, route_opts, grad_opts;
  std::string dataset_path, heldout_path, checkpoint_path, variants_text;
  std::size_t export_count = 0, instances = 20;
  bool all_blocks = false;

  auto* gen = app.add_subcommand("gen-data", "Write train.mimp and heldout.mimp");
  add_common(gen, gen_opts);
  gen->add_option("--export-images", export_count, "Also write the first N pairs as PGM/PPM");

  auto* train = app.add_subcommand("train", "Train a model; writes checkpoint.mimd and loss.txt");
  add_common(train, train_opts);
  train->add_option("--dataset", dataset_path, "Training dataset (default: data.path)");

  auto* restore = app.add_subcommand("restore", "Restore a dataset; writes restored.tensors and metrics.txt");
  add_common(restore, restore_opts);
  restore->add_option("--checkpoint", checkpoint_path, "Checkpoint file")->required();
  restore->add_option("--dataset", dataset_path, "Degraded/clean pairs to restore")->required();
  restore->add_option("--export-images", export_count, "Also write the first N restorations");

  auto* ablate_cmd = app.add_subcommand("ablate", "Train and evaluate variants; writes ablation.txt");
  add_common(ablate_cmd, ablate_opts);
  ablate_cmd->add_option("--variants", variants_text, "Comma-separated variant tags")->required();
  ablate_cmd->add_option("--dataset", dataset_path, "Training dataset (default: data.path)");
  ablate_cmd->add_option("--heldout", heldout_path,
                         "Evaluation dataset (default: generated from the config)");

  auto* route = app.add_subcommand("route-report", "Per-label mean dense gates; writes routing_report.txt");
  add_common(route, route_opts);
  route->add_option("--checkpoint", checkpoint_path, "Checkpoint file")->required();
  route->add_option("--dataset", dataset_path, "Labeled dataset")->required();
  route->add_flag("--all-blocks", all_blocks, "Average gates over all blocks instead of block 0");

  auto* grad = app.add_subcommand("grad-check", "Finite-difference check of every gradient");
  add_common(grad, grad_opts);
  grad->add_option("--instances", instances, "Random instances per case")->capture_default_str();

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? 0 : 1;
  }

  try {
    if (*gen) {
      const ExperimentConfig c = resolve_config(gen_opts);
      const std::string out = prepare_out(gen_opts);
      const Dataset tr = build_dataset(c.dataset_options(false), join(out, "train.mimp"));
      const Dataset ho = build_dataset(c.dataset_options(true), join(out, "heldout.mimp"));
      if (export_count > 0) {
        std::vector<Tensor> clean, degraded;
        for (const auto& s : tr.samples) {
          clean.push_back(s.clean);
          degraded.push_back(s.degraded);
        }
        export_images(out, "clean", clean, export_count);
        export_images(out, "degraded", degraded, export_count);
      }
      std::cout << "wrote " << tr.samples.size() << " training and " << ho.samples.size()
                << " held-out samples to " << out << '\n';
    } else if (*train) {
      ExperimentConfig c = resolve_config(train_opts);
      const std::string out = prepare_out(train_opts);
      const Dataset data = read_dataset(dataset_path.empty() ? c.data.path : dataset_path);
      TrainResult result = train_model(c, data, &std::cout);
      save_checkpoint(join(out, "checkpoint.mimd"), result.model);
      write_text(join(out, "loss.txt"), format_loss_curve(result.curve));
      save_config(join(out, "config.ini"), c);
      std::cout << "parameters " << result.model.parameter_count() << "\nfinal loss "
                << format_double(result.final_loss) << '\n';
    } else if (*restore) {
      const ExperimentConfig c = resolve_config(restore_opts);
      const std::string out = prepare_out(restore_opts);
      MiMDiT model = restore_opts.config_path.empty()
                         ? load_checkpoint(checkpoint_path)
                         : load_checkpoint(checkpoint_path, c.effective_model());
      const Dataset data = read_dataset(dataset_path);
      const RestoreResult result = restore_dataset(model, data, c.sampler, c.seed);
      write_tensor_list(join(out, "restored.tensors"), result.restored);
      write_text(join(out, "metrics.txt"), format_metrics(result.metrics));
      export_images(out, "restored", result.restored, export_count);
      std::cout << format_metrics(result.metrics);
    } else if (*ablate_cmd) {
      const ExperimentConfig c = resolve_config(ablate_opts);
      const std::string out = prepare_out(ablate_opts);
      const auto variants = parse_variant_list(variants_text);
      const Dataset tr = read_dataset(dataset_path.empty() ? c.data.path : dataset_path);
      const Dataset ho = heldout_path.empty() ? generate_dataset(c.dataset_options(true))
                                              : read_dataset(heldout_path);
      const auto rows = ablate(c, variants, tr, ho, &std::cout);
      write_text(join(out, "ablation.txt"), format_ablation_table(rows));
      std::cout << format_ablation_table(rows);
    } else if (*route) {
      const ExperimentConfig c = resolve_config(route_opts);
      const std::string out = prepare_out(route_opts);
      MiMDiT model = route_opts.config_path.empty()
                         ? load_checkpoint(checkpoint_path)
                         : load_checkpoint(checkpoint_path, c.effective_model());
      const Dataset data = read_dataset(dataset_path);
      std::vector<RoutingTrace> traces;
      const RoutingReport report = route_report(model, data, c.seed, all_blocks, &traces);
      std::string trace_text;
      for (const auto& t : traces) trace_text += format_trace(t) + '\n';
      write_text(join(out, "routing_report.txt"), format_routing_report(report));
      write_text(join(out, "routing_traces.txt"), trace_text);
      std::cout << format_routing_report(report);
    } else if (*grad) {
      GradCheckOptions o;
      o.instances = instances;
      if (grad_opts.seed) o.seed = *grad_opts.seed;
      bool ok = true;
      std::string text;
      run_grad_check(o, [&](const GradCheckResult& r) {
        const std::string line = std::string(r.passed ? "PASS " : "FAIL ") + r.name +
                                 " coords=" + std::to_string(r.coordinates) +
                                 " max_rel_err=" + format_double(r.max_relative_error) + '\n';
        std::cout << line << std::flush;
        text += line;
        ok = ok && r.passed;
      });
      if (grad_opts.out != ".") write_text(join(prepare_out(grad_opts), "grad_check.txt"), text);
      if (!ok) {
        std::cerr << "gradient check failed\n";
        return 2;
      }
    }
  } catch (const NumericalError& e) {
    std::cerr << "numerical failure at step " << e.step() << ": " << e.what() << '\n';
    return 2;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << '\n';
    return 1;
  }
  return 0;
}
