#pragma once

// JSON mirrors of the tool's tabular reports, and small file helpers. Every
// CSV a command emits has a JSON twin with the same numbers, for consumers
// that would rather not parse CSV.

#include <string>
#include <vector>

#include <json.hpp>

#include "astrosnn/bench.hpp"
#include "astrosnn/tasks.hpp"
#include "astrosnn/verify.hpp"

namespace astrosnn {

nlohmann::json equiv_report_json(const EquivReport& rep);
nlohmann::json grad_report_json(const GradReport& rep);
nlohmann::json bench_report_json(const BenchReport& rep);
nlohmann::json sweep_points_json(const std::vector<SweepPoint>& points);

// Single task run: outcome plus a bootstrap interval over its episodes.
struct TaskRunReport {
    std::string task;
    std::string cell;
    int64_t length = 0;
    int64_t train_steps = 0;
    std::string metric_name;
    double metric_value = 0;
    BootCI ci;
    int64_t episodes = 0;
};
nlohmann::json task_run_json(const TaskRunReport& rep);
void write_task_run_csv(const TaskRunReport& rep, std::ostream& os);

void write_json_file(const std::string& path, const nlohmann::json& j);
void write_text_file(const std::string& path, const std::string& content);
std::string read_text_file(const std::string& path);

}  // namespace astrosnn
