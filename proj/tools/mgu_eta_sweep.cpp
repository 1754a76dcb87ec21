// mgu_eta_sweep: runs MGU over the auxiliary source scenes of a trained run
// for a list of step sizes and prints termination statistics as CSV.

#include <algorithm>
#include <chrono>
#include <iostream>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include <CLI11.hpp>

#include "asl/mgu.hpp"
#include "asl/parallel.hpp"
#include "asl/pipeline.hpp"
#include "asl/run_config.hpp"
#include "asl/scenes.hpp"
#include "asl/segmodel.hpp"

int main(int argc, char** argv) {
  CLI::App app{"Step-size sweep for masked gradient update"};
  std::string config_path;
  std::string run_dir;
  std::vector<double> etas = {0.05, 0.5, 5, 25, 100, 400};
  std::optional<std::uint64_t> seed;
  app.add_option("--config", config_path, "Config file")->required();
  app.add_option("--run", run_dir, "Run directory holding the pre-trained checkpoint")->required();
  app.add_option("--etas", etas, "Step sizes to try")->delimiter(',');
  app.add_option("--seed", seed, "Override the master seed");
  CLI11_PARSE(app, argc, argv);

  try {
    asl::cli::RunConfig config = asl::cli::load_config(config_path);
    if (seed) asl::cli::apply_seed(config, *seed);
    asl::cli::validate(config);
    const asl::scenes::Corpus corpus = asl::scenes::generate_corpus(config.corpus);
    const asl::seg::SegModel model =
        asl::seg::load_checkpoint(std::filesystem::path(run_dir) / asl::cli::paths::kPretrained);
    const auto sources = asl::mgu::select_sources(corpus.train, config.corpus.num_classes, config.mgu);
    std::vector<std::pair<std::size_t, std::size_t>> jobs;
    for (std::size_t c = 0; c < sources.size(); ++c) {
      for (std::size_t idx : sources[c]) jobs.emplace_back(c, idx);
    }

    std::cout << "eta,scenes,empty_set,reentry_blocked,iter_cap,non_finite,median_iterations,mean_seconds\n";
    for (double eta : etas) {
      asl::mgu::MguConfig mc = config.mgu;
      mc.step_size = eta;
      std::vector<asl::mgu::Termination> term(jobs.size());
      std::vector<std::size_t> iters(jobs.size());
      const auto t0 = std::chrono::steady_clock::now();
      asl::parallel_for(jobs.size(), [&](std::size_t j) {
        try {
          const auto r = asl::mgu::masked_gradient_update(model, corpus.train[jobs[j].second], jobs[j].first, mc);
          term[j] = r.trace.termination;
          iters[j] = r.trace.iterations;
        } catch (const asl::mgu::MguError& e) {
          term[j] = e.trace().termination;
          iters[j] = e.trace().iterations;
        }
      });
      const double seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
      std::map<asl::mgu::Termination, std::size_t> counts;
      for (auto t : term) ++counts[t];
      std::vector<std::size_t> sorted = iters;
      std::sort(sorted.begin(), sorted.end());
      const std::size_t median = sorted.empty() ? 0 : sorted[sorted.size() / 2];
      std::cout << eta << ',' << jobs.size() << ',' << counts[asl::mgu::Termination::kEmptySet] << ','
                << counts[asl::mgu::Termination::kReentryBlocked] << ',' << counts[asl::mgu::Termination::kIterCap]
                << ',' << counts[asl::mgu::Termination::kNonFinite] << ',' << median << ','
                << seconds / static_cast<double>(std::max<std::size_t>(jobs.size(), 1)) << '\n';
    }
  } catch (const std::exception& e) {
    std::cerr << "mgu_eta_sweep: " << e.what() << "\n";
    return 1;
  }
  return 0;
}
