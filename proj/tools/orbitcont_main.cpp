#include <orbitcont/cli.hpp>

#include <CLI11.hpp>

#include <iostream>

using namespace orbitcont;

namespace {

int dispatch(const std::string& command, const cli::Options& opts) {
  const cli::RunConfig cfg = cli::load_config(opts.config);
  cli::json out;
  int code = 0;
  if (command == "refine-po") {
    out = cli::cmd_refine_po(cfg, opts);
  } else if (command == "floquet") {
    out = cli::cmd_floquet(cfg, opts);
  } else if (command == "continue") {
    out = cli::cmd_continue(cfg, opts);
  } else if (command == "verify") {
    bool ok = false;
    out = cli::cmd_verify(cfg, opts, &ok);
    code = ok ? 0 : 3;
  } else {
    out = cli::cmd_export(cfg, opts);
  }
  std::cout << out.dump(2) << "\n";
  return code;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Two-dimensional unstable manifolds by orbit continuation"};
  app.set_version_flag("--version", std::string(io::version));
  app.require_subcommand(1);

  cli::Options opts;
  const char* names[] = {"refine-po", "floquet", "continue", "verify", "export"};
  const char* help[] = {"refine the periodic orbit guess from the config",
                        "compute the leading Floquet pair of the periodic orbit",
                        "seed and continue the orbit family, writing mesh and logs",
                        "run the dense eigenstructure and GMRES-bound checks",
                        "re-export mesh.json as mesh.csv and surface.obj"};
  std::vector<CLI::App*> subs;
  for (int i = 0; i < 5; ++i) {
    CLI::App* sub = app.add_subcommand(names[i], help[i]);
    sub->add_option("--config", opts.config, "run configuration (JSON)")->required()->check(CLI::ExistingFile);
    sub->add_option("--out", opts.out, "output directory (overrides output_dir)");
    sub->add_option("--workers", opts.workers, "worker threads (0: min(cores, intervals))")
        ->check(CLI::NonNegativeNumber);
    sub->add_option("--po", opts.po, "periodic orbit file (default: <out>/po.json)");
    if (std::string(names[i]) == "continue") {
      sub->add_option("--checkpoint", opts.checkpoint, "resume from this checkpoint file");
      sub->add_option("--side", opts.side, "sign of u1 (+1 or -1), overrides left.u1_sign")
          ->check(CLI::IsMember({-1, 1}));
    }
    subs.push_back(sub);
  }

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    return app.exit(e);
  }

  std::string command;
  for (auto* s : subs)
    if (s->parsed()) command = s->get_name();

  try {
    return dispatch(command, opts);
  } catch (const Error& e) {
    std::cout << cli::error_json(e.kind(), e.what()).dump() << "\n";
    return 2;
  } catch (const std::exception& e) {
    std::cout << cli::error_json("internal", e.what()).dump() << "\n";
    return 2;
  }
}
