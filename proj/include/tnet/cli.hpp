#pragma once

#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <ostream>
#include <string>
#include <vector>

#include <CLI11.hpp>

#include "tnet/analysis.hpp"
#include "tnet/bench.hpp"
#include "tnet/decomp.hpp"
#include "tnet/grad.hpp"
#include "tnet/io.hpp"
#include "tnet/tnet.hpp"

namespace tnet::cli {

inline std::string fmt17(double v) {
    char buf[64];
    std::snprintf(buf, sizeof buf, "%.17g", v);
    return buf;
}

/// Comma-separated positive integers, e.g. "2,2,2,2,96,96,3,3".
inline Shape parse_rank_list(const std::string& text) {
    Shape out;
    std::size_t pos = 0;
    if (text.empty()) throw rank_error("empty rank list");
    while (pos <= text.size()) {
        const std::size_t comma = text.find(',', pos);
        const std::string tok =
            comma == std::string::npos ? text.substr(pos) : text.substr(pos, comma - pos);
        if (tok.empty() || tok.find_first_not_of("0123456789") != std::string::npos) {
            throw rank_error("malformed rank list: '" + text + "'");
        }
        const unsigned long long v = std::stoull(tok);
        if (v == 0) throw rank_error("ranks must be >= 1");
        out.push_back(static_cast<std::size_t>(v));
        if (comma == std::string::npos) break;
        pos = comma + 1;
    }
    return out;
}

inline Shape resolve_tucker_ranks(const std::string& text, const Shape& dims) {
    if (text == "full") return dims;
    const Shape ranks = parse_rank_list(text);
    if (ranks.size() != dims.size()) {
        throw rank_error("expected " + std::to_string(dims.size()) + " ranks, got " +
                         std::to_string(ranks.size()));
    }
    return ranks;
}

/// Full chains include the boundary 1s, e.g. "1,4,4,12,24,110,9,3,1".
inline Shape resolve_mps_chain(const std::string& text, const Shape& dims) {
    if (text == "full") {
        Shape chain(dims.size() + 1, 1);
        for (std::size_t k = 1; k < dims.size(); ++k) {
            std::size_t left = 1, right = 1;
            for (std::size_t j = 0; j < k; ++j) left *= dims[j];
            for (std::size_t j = k; j < dims.size(); ++j) right *= dims[j];
            chain[k] = std::min(left, right);
        }
        return chain;
    }
    const Shape chain = parse_rank_list(text);
    if (chain.size() != dims.size() + 1) {
        throw rank_error("rank chain must have " + std::to_string(dims.size() + 1) +
                         " entries including the boundary 1s");
    }
    if (chain.front() != 1 || chain.back() != 1) {
        throw rank_error("boundary ranks of the chain must be 1");
    }
    return chain;
}

namespace detail {

inline void print_table(std::ostream& os, const std::vector<std::vector<std::string>>& rows) {
    std::vector<std::size_t> width;
    for (const auto& r : rows) {
        if (width.size() < r.size()) width.resize(r.size(), 0);
        for (std::size_t i = 0; i < r.size(); ++i) width[i] = std::max(width[i], r[i].size());
    }
    for (const auto& r : rows) {
        std::string line;
        for (std::size_t i = 0; i < r.size(); ++i) {
            if (i) line += "  ";
            line += r[i];
            if (i + 1 < r.size()) line += std::string(width[i] - r[i].size(), ' ');
        }
        os << line << "\n";
    }
}

inline std::vector<std::string> report_text_row(const ParamReport& r, int decimals) {
    return {r.method,
            r.descriptor,
            std::to_string(r.tensorized),
            std::to_string(r.overhead),
            std::to_string(r.total),
            format_ratio(r.ratio, decimals)};
}

inline void write_report_csv(std::ostream& os, const std::vector<ParamReport>& rows) {
    os << "method,ranks,tensorized,overhead,total,ratio\n";
    for (const auto& r : rows) {
        os << r.method << ",\"" << r.descriptor << "\"," << r.tensorized << "," << r.overhead << ","
           << r.total << "," << fmt17(r.ratio) << "\n";
    }
}

inline std::ofstream open_csv(const std::string& path) {
    std::ofstream os(path, std::ios::binary);
    if (!os) throw io_error("cannot open " + path + " for writing");
    return os;
}

inline ArchConfig load_arch_or(const std::string& path, const ArchConfig& fallback) {
    return path.empty() ? fallback : read_arch_config(path);
}

inline Count resolve_overhead(const ArchConfig& arch, bool flag_given, Count flag_value) {
    if (flag_given) return flag_value;
    if (arch.overhead_params > 0.0) {
        return static_cast<Count>(std::llround(arch.overhead_params));
    }
    return default_overhead_params;
}

inline void emit_reports(std::ostream& out, const std::string& csv_path,
                         const std::vector<ParamReport>& rows, int decimals) {
    std::vector<std::vector<std::string>> text;
    text.push_back({"method", "ranks", "tensorized", "overhead", "total", "ratio"});
    for (const auto& r : rows) text.push_back(report_text_row(r, decimals));
    print_table(out, text);
    if (!csv_path.empty()) {
        auto os = open_csv(csv_path);
        write_report_csv(os, rows);
    }
}

}  // namespace detail

/// Parses and executes one invocation. Exit codes: 0 success, 1 invalid
/// usage or input, 2 numerical failure.
inline int run(int argc, const char* const* argv, std::ostream& out, std::ostream& err) {
    CLI::App app{"tensorized-network toolkit: parameter analysis, decomposition, training, timing"};
    app.require_subcommand(1);

    std::string arch_path, tucker_ranks, mps_ranks, ranks_text, method;
    std::string input_path, out_dir, bundle_dir, against_path, csv_path;
    Count overhead = 0;
    std::uint64_t seed = 0;
    std::size_t steps = 300;
    double scale = 1.0;

    auto* analyze = app.add_subcommand("analyze", "Parameter counts and compression ratios");
    analyze->add_option("--arch", arch_path, "architecture JSON (default: full-scale reference)");
    analyze->add_option("--tucker-ranks", tucker_ranks, "per-mode ranks, or 'full'");
    analyze->add_option("--mps-ranks", mps_ranks, "rank chain including boundary 1s");
    analyze->add_option("--overhead", overhead, "untensorized parameter count");
    analyze->add_option("--csv", csv_path, "also write rows as CSV");

    auto* table2 = app.add_subcommand("table2", "Reproduce the mode-redundancy ratio table");
    table2->add_option("--arch", arch_path, "architecture JSON (default: full-scale reference)");
    table2->add_option("--overhead", overhead, "untensorized parameter count");
    table2->add_option("--csv", csv_path, "also write rows as CSV");

    auto* table3 = app.add_subcommand("table3", "Reproduce the method-comparison ratio table");
    table3->add_option("--arch", arch_path, "architecture JSON (default: full-scale reference)");
    table3->add_option("--overhead", overhead, "untensorized parameter count");
    table3->add_option("--csv", csv_path, "also write rows as CSV");

    auto* decompose = app.add_subcommand("decompose", "Factorize a stored tensor into a bundle");
    decompose->add_option("--input", input_path, "tensor file")->required();
    decompose->add_option("--method", method, "tucker or mps")->required();
    decompose->add_option("--ranks", ranks_text, "rank list, or 'full'")->required();
    decompose->add_option("--out", out_dir, "bundle directory")->required();

    auto* rerr = app.add_subcommand("reconstruct-error", "Relative error of a bundle vs a tensor");
    rerr->add_option("--bundle", bundle_dir, "bundle directory")->required();
    rerr->add_option("--against", against_path, "reference tensor file")->required();

    auto* train = app.add_subcommand("train-toy", "Train the toy stacked-hourglass network");
    train->add_option("--arch", arch_path, "architecture JSON (default: toy-scale)");
    train->add_option("--ranks", ranks_text, "per-mode ranks, or 'full'")->default_val("full");
    train->add_option("--seed", seed, "task and init seed")->required();
    train->add_option("--steps", steps, "training steps")->default_val("300");
    train->add_option("--csv", csv_path, "write the step,loss log here instead of stdout");
    train->add_option("--out", out_dir, "save the trained factor bundle here");

    auto* bench = app.add_subcommand("bench", "Time reference vs factorized convolution");
    bench->add_option("--scale", scale, "geometry scale in (0, 1]")->default_val("1.0");
    bench->add_option("--ranks", ranks_text, "feature ranks to sweep (default: 96,64,50,32 scaled)");
    bench->add_option("--seed", seed, "data seed")->default_val("2024");
    bench->add_option("--csv", csv_path, "also write rows as CSV");

    try {
        app.parse(argc, argv);
    } catch (const CLI::CallForHelp& e) {
        return app.exit(e, out, err);
    } catch (const CLI::CallForAllHelp& e) {
        return app.exit(e, out, err);
    } catch (const CLI::ParseError& e) {
        err << "error: " << e.what() << "\n";
        return 1;
    }

    try {
        if (analyze->parsed()) {
            const ArchConfig arch = detail::load_arch_or(arch_path, full_scale_arch());
            const Shape dims = weight_tensor_shape(arch);
            const Count e = detail::resolve_overhead(arch, analyze->count("--overhead") > 0, overhead);
            const Count dense = count_dense(arch);

            std::vector<ParamReport> rows;
            rows.push_back(tnet::detail::make_report("dense", dims, dense, e, dense));
            if (!tucker_ranks.empty()) {
                const Shape r = resolve_tucker_ranks(tucker_ranks, dims);
                rows.push_back(tnet::detail::make_report("tucker", r, count_tucker(arch, r), e, dense));
            }
            if (!mps_ranks.empty()) {
                const Shape chain = resolve_mps_chain(mps_ranks, dims);
                rows.push_back(
                    tnet::detail::make_report("mps", chain, count_mps(arch, chain), e, dense));
            }
            detail::emit_reports(out, csv_path, rows, 2);
        } else if (table2->parsed()) {
            const ArchConfig arch = detail::load_arch_or(arch_path, full_scale_arch());
            const Count e = detail::resolve_overhead(arch, table2->count("--overhead") > 0, overhead);
            detail::emit_reports(out, csv_path, reproduce_table2(arch, e), 2);
        } else if (table3->parsed()) {
            const ArchConfig arch = detail::load_arch_or(arch_path, full_scale_arch());
            const Count e = detail::resolve_overhead(arch, table3->count("--overhead") > 0, overhead);
            detail::emit_reports(out, csv_path, reproduce_table3(arch, e), 1);
        } else if (decompose->parsed()) {
            const DenseTensor t = read_tensor(input_path);
            if (method == "tucker") {
                const Shape ranks = resolve_tucker_ranks(ranks_text, t.shape);
                const HooiResult h = hooi(t, ranks);
                const double rel = relative_error(tucker_reconstruct(h.factors), t);
                save_bundle(out_dir, h.factors, rel, h.fit_history.size() - 1);
                out << "method: tucker\nrelative error: " << fmt17(rel)
                    << "\nsweeps: " << h.fit_history.size() - 1 << "\nwrote: " << out_dir << "\n";
            } else if (method == "mps") {
                const Shape chain = resolve_mps_chain(ranks_text, t.shape);
                const Shape interior(chain.begin() + 1, chain.end() - 1);
                const TtSvdResult r = tt_svd(t, interior);
                const double rel = relative_error(mps_reconstruct(r.cores), t);
                save_bundle(out_dir, r.cores, rel, 1);
                for (const RankClamp& c : r.clamps) {
                    out << "clamped chain rank at position " << c.position << ": requested "
                        << c.requested << " -> used " << c.used << "\n";
                }
                out << "method: mps\nrelative error: " << fmt17(rel) << "\nwrote: " << out_dir
                    << "\n";
            } else {
                throw std::invalid_argument("unknown method '" + method + "' (tucker or mps)");
            }
        } else if (rerr->parsed()) {
            const DenseTensor reference = read_tensor(against_path);
            const DecompBundle bundle = load_bundle(bundle_dir);
            const DenseTensor approx = bundle.method == "tucker"
                                           ? tucker_reconstruct(bundle.tucker)
                                           : mps_reconstruct(bundle.mps);
            out << fmt17(relative_error(approx, reference)) << "\n";
        } else if (train->parsed()) {
            const ArchConfig arch = detail::load_arch_or(arch_path, toy_scale_arch());
            const Shape ranks = resolve_tucker_ranks(ranks_text, weight_tensor_shape(arch));
            const ToyTask task = ToyTask::make(seed);
            const TrainResult r = train_toy(arch, ranks, task, steps);

            std::string csv = "step,loss\n";
            for (std::size_t i = 0; i < r.loss_history.size(); ++i) {
                csv += std::to_string(i) + "," + fmt17(r.loss_history[i]) + "\n";
            }
            if (csv_path.empty()) {
                out << csv;
            } else {
                auto os = detail::open_csv(csv_path);
                os << csv;
                out << "steps: " << r.loss_history.size() << "\ninitial: "
                    << fmt17(r.loss_history.empty() ? 0.0 : r.loss_history.front())
                    << "\nfinal: " << fmt17(r.loss_history.empty() ? 0.0 : r.loss_history.back())
                    << "\nwrote: " << csv_path << "\n";
            }
            if (!out_dir.empty()) save_bundle(out_dir, r.factors, 0.0, r.loss_history.size());
        } else if (bench->parsed()) {
            BenchConfig cfg;
            cfg.scale = scale;
            cfg.seed = seed;
            if (!ranks_text.empty()) cfg.ranks = parse_rank_list(ranks_text);
            const BenchReport report = run_bench(cfg);

            out << "geometry: " << report.channels << " channels, " << report.height << "x"
                << report.width << " input, " << report.kernel << "x" << report.kernel
                << " kernel\n";
            std::vector<std::vector<std::string>> text;
            text.push_back({"rank", "baseline_macs", "factorized_macs", "mac_ratio", "reference_ms",
                            "factorized_ms", "speedup"});
            for (const BenchRow& r : report.rows) {
                char ratio[32], refms[32], factms[32], speed[32];
                std::snprintf(ratio, sizeof ratio, "%.2f", r.mac_ratio);
                std::snprintf(refms, sizeof refms, "%.3f", r.reference_ms);
                std::snprintf(factms, sizeof factms, "%.3f", r.factorized_ms);
                std::snprintf(speed, sizeof speed, "%.2f", r.measured_speedup);
                text.push_back({std::to_string(r.rank), std::to_string(r.macs.baseline),
                                std::to_string(r.macs.factorized), ratio, refms, factms, speed});
            }
            detail::print_table(out, text);
            out << "note: times are hardware-dependent medians; MAC counts are exact\n";
            if (!csv_path.empty()) {
                auto os = detail::open_csv(csv_path);
                os << "rank,baseline_macs,factorized_macs,mac_ratio,reference_ms,factorized_ms,"
                      "speedup\n";
                for (const BenchRow& r : report.rows) {
                    os << r.rank << "," << r.macs.baseline << "," << r.macs.factorized << ","
                       << fmt17(r.mac_ratio) << "," << fmt17(r.reference_ms) << ","
                       << fmt17(r.factorized_ms) << "," << fmt17(r.measured_speedup) << "\n";
                }
            }
        }
    } catch (const convergence_error& e) {
        err << "numerical failure: " << e.what() << "\n";
        return 2;
    } catch (const std::exception& e) {
        err << "error: " << e.what() << "\n";
        return 1;
    }
    return 0;
}

}  // namespace tnet::cli
