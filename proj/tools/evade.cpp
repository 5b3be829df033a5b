// evade: command-line front end. Exit codes: 0 ok, 1 validation, 2 transport,
// 3 internal.

#include <iostream>
#include <optional>
#include <string>

#include <CLI11.hpp>

#include "evade/pipeline.hpp"
#include "evade/synth.hpp"

namespace {

enum Exit { kOk = 0, kValidation = 1, kTransport = 2, kInternal = 3 };

evade::Method method_arg(const std::string& s) {
  auto m = evade::parse_method(s);
  if (!m) throw evade::ValidationError("unknown method '" + s + "' (expected M0..M5)");
  return *m;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Adversarial robustness harness for AI-text detectors"};
  app.require_subcommand(1);

  std::string config_path = "configs/desk.json";
  std::string method;
  bool offline = false;
  std::optional<std::uint64_t> seed_override;
  std::string out;

  auto common = [&](CLI::App* sub) {
    sub->add_option("--config", config_path, "run config (JSON)");
    sub->add_flag("--offline", offline, "use in-process stand-ins; never open a network connection");
    sub->add_option("--seed-override", seed_override, "replace the root seed");
    sub->add_option("--out", out, "output directory (overrides the config)");
  };

  auto* build = app.add_subcommand("build-detectors", "train and snapshot the in-process detectors");
  auto* attack = app.add_subcommand("attack", "run one attack over the eval AI samples");
  auto* trainc = app.add_subcommand("train", "train the rewrite policy for M2 or M4");
  auto* evaluate = app.add_subcommand("evaluate", "score all attack outputs and write the report");
  auto* judge = app.add_subcommand("judge", "rate paraphrases with the judge");
  auto* report = app.add_subcommand("report", "rebuild the report from persisted scores");
  for (auto* s : {build, attack, trainc, evaluate, judge, report}) common(s);
  attack->add_option("--method", method, "M0..M5")->required();
  trainc->add_option("--method", method, "M2 or M4")->default_val("M2");

  auto* synth = app.add_subcommand("synth", "write a synthetic two-register corpus as JSONL");
  std::size_t n_human = 200, n_ai = 600;
  std::uint64_t synth_seed = 1;
  std::string prefix = "s";
  synth->add_option("--out", out, "output file")->required();
  synth->add_option("--human", n_human, "human samples");
  synth->add_option("--ai", n_ai, "AI samples");
  synth->add_option("--seed", synth_seed, "generator seed");
  synth->add_option("--prefix", prefix, "id prefix");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    return app.exit(e) == 0 ? kOk : kValidation;
  }

  try {
    if (synth->parsed()) {
      auto c = evade::synth::generate({n_human, n_ai, synth_seed, prefix});
      evade::write_file_atomic(out, evade::to_jsonl(c));
      std::cerr << "wrote " << c.size() << " samples to " << out << "\n";
      return kOk;
    }

    evade::PipelineOptions opt;
    opt.offline = offline;
    opt.seed_override = seed_override;
    if (!out.empty()) opt.out = out;
    evade::Pipeline p(evade::RunConfig::load(config_path), opt);

    if (build->parsed()) {
      p.build_detectors();
    } else if (attack->parsed()) {
      p.attack(method_arg(method));
    } else if (trainc->parsed()) {
      p.train_policy(method_arg(method));
    } else if (evaluate->parsed()) {
      p.evaluate();
    } else if (judge->parsed()) {
      auto r = p.judge();
      std::cout << r.summary_json().dump(2) << "\n";
    } else if (report->parsed()) {
      std::cout << p.report().metrics_csv;
    }
    if (offline && evade::transport_stats().connections != 0) {
      std::cerr << "internal: network connection opened in offline mode\n";
      return kInternal;
    }
    return kOk;
  } catch (const evade::CorpusValidationError& e) {
    std::cerr << "validation error: " << e.what() << "\n" << e.report().dump(2) << "\n";
    return kValidation;
  } catch (const evade::ValidationError& e) {
    std::cerr << "validation error: " << e.what() << "\n";
    return kValidation;
  } catch (const evade::TransportError& e) {
    std::cerr << "transport error after " << e.attempts() << " attempts: " << e.what() << "\n";
    return kTransport;
  } catch (const evade::ProtocolError& e) {
    std::cerr << "transport error: " << e.what() << "\n";
    return kTransport;
  } catch (const std::exception& e) {
    std::cerr << "internal error: " << e.what() << "\n";
    return kInternal;
  }
}
