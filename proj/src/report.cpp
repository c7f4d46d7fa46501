#include "astrosnn/report.hpp"

#include <fstream>
#include <sstream>

#include "astrosnn/errors.hpp"

namespace astrosnn {

nlohmann::json equiv_report_json(const EquivReport& rep) {
    nlohmann::json trials = nlohmann::json::array();
    for (const EquivTrial& t : rep.trials)
        trials.push_back({{"trial", t.index},
                          {"d", t.d},
                          {"heads", t.heads},
                          {"steps", t.steps},
                          {"chunk", t.chunk},
                          {"seed", t.seed},
                          {"max_pre_diff", t.max_pre_diff},
                          {"spike_mismatches", t.spike_mismatches},
                          {"pass", t.pass}});
    return {{"tolerance", rep.tolerance},
            {"trials", trials},
            {"failures", rep.failures},
            {"seconds", rep.seconds},
            {"pass", rep.pass}};
}

nlohmann::json grad_report_json(const GradReport& rep) {
    nlohmann::json entries = nlohmann::json::array();
    for (const GradEntry& e : rep.entries)
        entries.push_back({{"tensor", e.name},
                           {"samples", e.samples},
                           {"max_rel_err", e.max_rel_err},
                           {"pass", e.pass}});
    nlohmann::json hist = nlohmann::json::array();
    for (int b = 0; b < kGradHistBuckets; ++b)
        hist.push_back({{"bucket", grad_hist_label(b)},
                        {"count", rep.rel_err_histogram[static_cast<size_t>(b)]}});
    return {{"entries", entries},
            {"rel_err_histogram", hist},
            {"max_rel_err", rep.max_rel_err},
            {"bptt_max_diff", rep.bptt_max_diff},
            {"seconds", rep.seconds},
            {"pass", rep.pass}};
}

nlohmann::json bench_report_json(const BenchReport& rep) {
    nlohmann::json rows = nlohmann::json::array();
    for (const BenchRow& r : rep.rows)
        rows.push_back({{"system", r.system},
                        {"seq_len", r.seq_len},
                        {"per_token_us", r.per_token_us},
                        {"tokens_per_sec", r.tokens_per_sec},
                        {"state_scalars", r.state_scalars},
                        {"state_bytes", r.state_bytes}});
    auto fit = [](const BenchFit& f) {
        return nlohmann::json{{"slope_us_per_len", f.slope_us_per_len},
                              {"slope_stderr", f.slope_stderr},
                              {"intercept_us", f.intercept_us}};
    };
    return {{"rows", rows},
            {"amsu_fit", fit(rep.amsu_fit)},
            {"attention_fit", fit(rep.attn_fit)},
            {"seconds", rep.seconds}};
}

nlohmann::json sweep_points_json(const std::vector<SweepPoint>& points) {
    nlohmann::json rows = nlohmann::json::array();
    for (const SweepPoint& p : points)
        rows.push_back({{"task", task_name(p.task)},
                        {"cell", cell_name(p.cell)},
                        {"length", p.length},
                        {"train_steps", p.train_steps},
                        {"metric_name", p.metric_name},
                        {"metric_value", p.metric_value},
                        {"seed", p.seed}});
    return {{"points", rows}};
}

nlohmann::json task_run_json(const TaskRunReport& rep) {
    return {{"task", rep.task},
            {"cell", rep.cell},
            {"length", rep.length},
            {"train_steps", rep.train_steps},
            {"metric_name", rep.metric_name},
            {"metric_value", rep.metric_value},
            {"ci_mean", rep.ci.mean},
            {"ci_lo", rep.ci.lo},
            {"ci_hi", rep.ci.hi},
            {"episodes", rep.episodes}};
}

void write_task_run_csv(const TaskRunReport& rep, std::ostream& os) {
    os << "task,cell,length,train_steps,metric_name,metric_value,ci_lo,ci_hi,episodes\n"
       << rep.task << ',' << rep.cell << ',' << rep.length << ',' << rep.train_steps << ','
       << rep.metric_name << ',' << rep.metric_value << ',' << rep.ci.lo << ',' << rep.ci.hi
       << ',' << rep.episodes << '\n';
}

void write_json_file(const std::string& path, const nlohmann::json& j) {
    std::ofstream f(path, std::ios::trunc);
    if (!f) throw IoError("cannot write report: " + path);
    f << j.dump(2) << '\n';
    if (!f) throw IoError("short write to report: " + path);
}

void write_text_file(const std::string& path, const std::string& content) {
    std::ofstream f(path, std::ios::binary | std::ios::trunc);
    if (!f) throw IoError("cannot write file: " + path);
    f.write(content.data(), static_cast<std::streamsize>(content.size()));
    if (!f) throw IoError("short write: " + path);
}

std::string read_text_file(const std::string& path) {
    std::ifstream f(path, std::ios::binary);
    if (!f) throw IoError("cannot read file: " + path);
    std::ostringstream ss;
    ss << f.rdbuf();
    return ss.str();
}

}  // namespace astrosnn
