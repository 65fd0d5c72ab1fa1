// SPDX-License-Identifier: Apache-2.0

#include <iostream>

#include "CLI11.hpp"
#include "commands.hpp"

int main(int argc, char** argv) {
    namespace cli = tva::cli;
    CLI::App app{"tva: surrogate-to-victim video attack lab"};
    app.require_subcommand(1);

    std::string config, out, data, perturb, in;
    bool sweep = false;

    auto* gen = app.add_subcommand("gen-data", "Write synthetic videos and labels as tensor files");
    gen->add_option("--config", config, "Run config (JSON)")->required();
    gen->add_option("--out", out, "Fresh output directory")->required();

    auto* atk = app.add_subcommand("attack", "Generate perturbations on the surrogate");
    atk->add_option("--config", config)->required();
    atk->add_option("--data", data, "Directory written by gen-data")->required();
    atk->add_option("--out", out)->required();

    auto* ev = app.add_subcommand("eval", "Evaluate perturbations on every victim");
    ev->add_option("--config", config)->required();
    ev->add_option("--data", data)->required();
    ev->add_option("--perturb", perturb, "Directory written by attack")->required();
    ev->add_option("--out", out)->required();
    ev->add_flag("--sweep", sweep, "Also run the temperature sweep");

    auto* ver = app.add_subcommand("verify", "Check the gradient identities numerically");
    ver->add_option("--config", config)->required();
    ver->add_option("--out", out)->required();

    auto* rep = app.add_subcommand("report", "Merge report CSVs and summarize");
    rep->add_option("--in", in, "Directory searched for report.csv files")->required();
    rep->add_option("--out", out, "Merged CSV path")->required();

    try {
        app.parse(argc, argv);
    } catch (const CLI::CallForHelp& e) {
        return app.exit(e);
    } catch (const CLI::ParseError& e) {
        app.exit(e);
        return cli::kUsage;
    }

    if (*gen) return cli::gen_data(config, out, std::cerr);
    if (*atk) return cli::attack(config, data, out, std::cerr);
    if (*ev) return cli::eval(config, data, perturb, out, sweep, std::cerr);
    if (*ver) return cli::verify(config, out, std::cerr);
    if (*rep) return cli::report(in, out, std::cerr);
    return cli::kUsage;
}
