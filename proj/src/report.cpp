#include "covmon/report.hpp"

#include <fstream>
#include <iomanip>
#include <sstream>
#include <stdexcept>

namespace covmon {

namespace {

std::vector<std::string> split_csv_line(const std::string& line) {
    std::vector<std::string> out;
    std::string cur;
    for (char c : line) {
        if (c == ',') {
            out.push_back(cur);
            cur.clear();
        } else if (c != '\r') {
            cur.push_back(c);
        }
    }
    out.push_back(cur);
    return out;
}

std::string fmt(double v, int precision = 6) {
    std::ostringstream ss;
    ss << std::setprecision(precision) << v;
    return ss.str();
}

}  // namespace

std::string detection_report_csv(const DetectionReport& report) {
    std::ostringstream ss;
    ss << "input_type,total";
    for (const auto& d : report.detectors) ss << ',' << d << "_accuracy," << d << "_accepted";
    ss << '\n';
    for (const auto& row : report.rows) {
        ss << row.input_type << ',' << row.total;
        for (size_t i = 0; i < report.detectors.size(); ++i)
            ss << ',' << fmt(row.accuracy[i], 17) << ',' << row.accepted[i];
        ss << '\n';
    }
    return ss.str();
}

DetectionReport detection_report_from_csv(const std::string& csv) {
    std::istringstream in(csv);
    std::string line;
    if (!std::getline(in, line)) throw std::invalid_argument("empty report CSV");
    auto header = split_csv_line(line);
    DetectionReport report;
    for (size_t i = 2; i + 1 < header.size(); i += 2) {
        std::string name = header[i];
        const std::string suffix = "_accuracy";
        if (name.size() > suffix.size())
            name = name.substr(0, name.size() - suffix.size());
        report.detectors.push_back(name);
    }
    while (std::getline(in, line)) {
        if (line.empty()) continue;
        auto cells = split_csv_line(line);
        DetectionReport::Row row;
        row.input_type = cells.at(0);
        row.total = std::stoll(cells.at(1));
        for (size_t i = 2; i + 1 < cells.size(); i += 2) {
            row.accuracy.push_back(std::stod(cells[i]));
            row.accepted.push_back(std::stoll(cells[i + 1]));
        }
        report.rows.push_back(std::move(row));
    }
    return report;
}

std::string detection_report_table(const DetectionReport& report) {
    size_t label_width = 12;
    for (const auto& row : report.rows) label_width = std::max(label_width, row.input_type.size());
    std::ostringstream ss;
    ss << std::left << std::setw(static_cast<int>(label_width) + 2) << "Input type"
       << std::right << std::setw(8) << "N";
    for (const auto& d : report.detectors) ss << std::setw(9) << d;
    ss << '\n';
    for (const auto& row : report.rows) {
        ss << std::left << std::setw(static_cast<int>(label_width) + 2) << row.input_type
           << std::right << std::setw(8) << row.total;
        for (double a : row.accuracy) ss << std::setw(9) << std::fixed << std::setprecision(3) << a;
        ss << '\n';
        ss.unsetf(std::ios::fixed);
    }
    return ss.str();
}

std::string bench_latency_csv(const BenchReport& report) {
    std::ostringstream ss;
    ss << "cam,installation,bare_mean_us,mean_us,p95_us,overhead_pct\n";
    for (const auto& r : report.latency)
        ss << r.cam << ',' << r.installation << ',' << fmt(r.bare_mean_us) << ',' << fmt(r.mean_us)
           << ',' << fmt(r.p95_us) << ',' << fmt(r.overhead_pct) << '\n';
    return ss.str();
}

std::string bench_memory_csv(const BenchReport& report) {
    std::ostringstream ss;
    ss << "cam,tap,payload_bytes,file_bytes\n";
    for (const auto& r : report.memory)
        ss << r.cam << ',' << r.tap_id << ',' << r.payload_bytes << ',' << r.file_bytes << '\n';
    return ss.str();
}

std::string sweep_csv(const std::vector<SweepRow>& rows) {
    std::ostringstream ss;
    ss << "epsilon,mean_eta,mean_confidence,adversarial_fraction\n";
    for (const auto& r : rows)
        ss << fmt(r.epsilon) << ',' << fmt(r.mean_eta, 17) << ',' << fmt(r.mean_confidence, 17)
           << ',' << fmt(r.adversarial_fraction, 17) << '\n';
    return ss.str();
}

std::string thresholds_text(const std::string& cam, const std::vector<double>& tau,
                            const std::vector<double>& youden_j) {
    std::ostringstream ss;
    ss << "[thresholds]\ncam = " << cam << "\n";
    for (size_t i = 0; i < tau.size(); ++i) {
        ss << "tau_" << i << " = " << fmt(tau[i], 17);
        if (i < youden_j.size()) ss << "    ; J = " << fmt(youden_j[i], 6);
        ss << '\n';
    }
    return ss.str();
}

void write_text_file(const std::filesystem::path& path, const std::string& text) {
    std::filesystem::create_directories(path.parent_path());
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out) throw std::runtime_error("cannot write " + path.string());
    out << text;
}

std::string read_text_file(const std::filesystem::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw std::runtime_error("cannot read " + path.string());
    std::ostringstream ss;
    ss << in.rdbuf();
    return ss.str();
}

}  // namespace covmon
