// tweezersim: figure experiments for a single-atom optical tweezer.
//
//   tweezersim [--config FILE] [--seed N] [--out DIR] [--threads N] <command> [--param value ...]
//
// Exit status: 0 success, 2 configuration error, 3 numerical failure.

#include <fstream>
#include <iostream>
#include <map>
#include <optional>
#include <string>

#include "CLI11.hpp"
#include "json.hpp"

#include "tweezersim/error.hpp"
#include "tweezersim/experiments.hpp"

namespace ex = tweezersim::experiments;
using nlohmann::json;

namespace {

int fail(int code, const std::string& kind, const std::string& message)
{
    std::cerr << ex::error_json(code, kind, message).dump() << '\n';
    return code;
}

} // namespace

int main(int argc, char** argv)
{
    CLI::App app{"Optical tweezer simulation: figure experiments with CSV/JSON outputs"};
    app.require_subcommand(1);
    app.fallthrough();

    std::optional<std::string> config_path;
    std::optional<std::uint64_t> seed;
    std::optional<unsigned> threads;
    std::optional<std::string> out;
    app.add_option("--config", config_path, "JSON config file; flags override it");
    app.add_option("--seed", seed, "64-bit seed (default 1)");
    app.add_option("--out", out, "output directory (default ./out)");
    app.add_option("--threads", threads, "worker threads, 0 = all cores (default 1)");

    std::map<std::string, std::map<std::string, std::optional<std::string>>> raw;
    std::map<std::string, CLI::App*> subs;
    for (const auto& cmd : ex::commands()) {
        auto* sub = app.add_subcommand(cmd.name, cmd.description);
        subs[cmd.name] = sub;
        for (const auto& p : cmd.params)
            sub->add_option(p.flag(), raw[cmd.name][p.key], p.help + " (default " + p.default_value.dump() + ")");
    }

    try {
        app.parse(argc, argv);
    } catch (const CLI::CallForHelp& e) {
        return app.exit(e);
    } catch (const CLI::CallForAllHelp& e) {
        return app.exit(e);
    } catch (const CLI::ParseError& e) {
        return fail(ex::config_error, "usage", e.what());
    }

    try {
        ex::RunRequest req;
        for (const auto& [name, sub] : subs)
            if (sub->parsed())
                req.command = name;
        const ex::Command& cmd = ex::find_command(req.command);

        req.flag_parameters = json::object();
        for (const auto& p : cmd.params)
            if (const auto& v = raw[cmd.name][p.key])
                req.flag_parameters[p.key] = ex::parse_value(p, *v);
        if (config_path) {
            std::ifstream in(*config_path);
            if (!in)
                return fail(ex::config_error, "config", "cannot read config file " + *config_path);
            req.file_config = json::parse(in);
        }
        req.seed = seed;
        req.threads = threads;
        req.out = out;

        const json manifest = ex::run(req);
        std::cout << json{{"status", "ok"}, {"command", manifest["command"]}, {"outputs", manifest["outputs"]},
                          {"summary", manifest["summary"]}}
                         .dump()
                  << '\n';
        return ex::ok;
    } catch (const json::exception& e) {
        return fail(ex::config_error, "config", e.what());
    } catch (const tweezersim::InvalidArgument& e) {
        return fail(ex::config_error, "invalid_argument", e.what());
    } catch (const tweezersim::NumericalFailure& e) {
        return fail(ex::numerical_failure, "numerical_failure", e.what());
    } catch (const std::exception& e) {
        return fail(ex::internal_error, "internal", e.what());
    }
}
