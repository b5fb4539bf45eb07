#include <filesystem>
#include <fstream>
#include <iostream>
#include <sstream>

#include "dlab/error.hpp"
#include "dlab/lab.hpp"

namespace dlab {

ReportResult write_report(const std::vector<std::string>& run_dirs, const std::string& out_path) {
    ReportResult res;
    std::ostringstream md;
    md << "# Lab report\n\n";
    for (const auto& dir : run_dirs) {
        std::filesystem::path p = std::filesystem::path(dir) / "summary.json";
        std::ifstream in(p);
        if (!in) {
            res.missing.push_back(dir);
            md << "## " << dir << "\n\nno summary.json\n\n";
            continue;
        }
        nlohmann::ordered_json s;
        try {
            s = nlohmann::ordered_json::parse(in);
        } catch (const nlohmann::json::exception& e) {
            throw DataError(p.string() + ": " + e.what());
        }
        ++res.sections;
        std::string name = s.value("experiment", dir);
        md << "## " << name << "\n\n";
        for (const auto& kind : {"checks", "observations"}) {
            if (!s.contains(kind)) continue;
            for (const auto& c : s[kind]) {
                bool ok = c.value("pass", false);
                std::string label = c.value("name", "?");
                md << "- " << (ok ? "PASS" : (std::string(kind) == "checks" ? "FAIL" : "not observed")) << " " << label
                   << " (" << c.value("detail", "") << ")\n";
                if (!ok && std::string(kind) == "checks") {
                    res.pass = false;
                    res.failures.push_back(name + ": " + label);
                }
            }
        }
        if (s.contains("metrics")) md << "\n```json\n" << s["metrics"].dump(2) << "\n```\n";
        md << "\n";
    }
    if (res.sections == 0) {
        std::cerr << "warning: no summaries found\n";
        md << "warning: no summaries found\n";
    }
    md << "\nOverall: " << (res.pass ? "PASS" : "FAIL") << "\n";
    res.text = md.str();
    std::ofstream out(out_path);
    if (!out) throw DataError("cannot write " + out_path);
    out << res.text;
    return res;
}

}  // namespace dlab
