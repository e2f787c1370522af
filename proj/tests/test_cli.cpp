#include <sys/stat.h>
#include <unistd.h>

#include <array>
#include <cmath>
#include <cstdio>
#include <cstdlib>
#include <fstream>
#include <sstream>
#include <string>

#include "doctest.h"
#include "json.hpp"

namespace {

struct CliResult {
    int exit_code = -1;
    std::string out;
};

CliResult run_cli(const std::string& args, const std::string& env = "") {
    const std::string cmd =
        (env.empty() ? "" : "env " + env + " ") + std::string(TOKMERGE_BIN) + " " + args + " 2>&1";
    std::array<char, 4096> buf{};
    CliResult res;
    FILE* pipe = popen(cmd.c_str(), "r");
    REQUIRE(pipe != nullptr);
    while (fgets(buf.data(), static_cast<int>(buf.size()), pipe) != nullptr) res.out += buf.data();
    const int status = pclose(pipe);
    res.exit_code = WIFEXITED(status) ? WEXITSTATUS(status) : -1;
    return res;
}

// Minimal JSON-Schema walker covering the subset the shipped schemas use:
// type, required, properties, items, enum, and the numeric bounds.
void validate_against(const nlohmann::json& schema, const nlohmann::json& value,
                      const std::string& where) {
    if (schema.contains("type")) {
        const std::string type = schema["type"].get<std::string>();
        INFO(where, " expects ", type);
        if (type == "object") REQUIRE(value.is_object());
        if (type == "array") REQUIRE(value.is_array());
        if (type == "string") REQUIRE(value.is_string());
        if (type == "boolean") REQUIRE(value.is_boolean());
        if (type == "integer") REQUIRE(value.is_number_integer());
        if (type == "number") REQUIRE(value.is_number());
    }
    if (schema.contains("enum")) {
        bool found = false;
        for (const auto& candidate : schema["enum"]) found = found || candidate == value;
        INFO(where, " enum");
        CHECK(found);
    }
    if (value.is_number()) {
        const double x = value.get<double>();
        if (schema.contains("minimum")) CHECK(x >= schema["minimum"].get<double>());
        if (schema.contains("maximum")) CHECK(x <= schema["maximum"].get<double>());
        if (schema.contains("exclusiveMinimum")) CHECK(x > schema["exclusiveMinimum"].get<double>());
    }
    if (schema.contains("required")) {
        for (const auto& key : schema["required"]) {
            INFO(where, " requires ", key.get<std::string>());
            REQUIRE(value.contains(key.get<std::string>()));
        }
    }
    if (schema.contains("properties") && value.is_object()) {
        for (const auto& [key, sub] : schema["properties"].items()) {
            if (value.contains(key)) validate_against(sub, value[key], where + "." + key);
        }
    }
    if (schema.contains("items") && value.is_array()) {
        for (size_t i = 0; i < value.size(); ++i) {
            validate_against(schema["items"], value[i], where + "[" + std::to_string(i) + "]");
        }
    }
}

nlohmann::json load_schema(const std::string& name) {
    std::ifstream in(std::string(TOKMERGE_SCHEMAS) + "/" + name);
    REQUIRE(in.good());
    return nlohmann::json::parse(in);
}

std::string scrub_timing(const std::string& text) {
    std::istringstream in(text);
    std::ostringstream out;
    std::string line;
    while (std::getline(in, line)) {
        if (line.find("wall") != std::string::npos || line.find("vps") != std::string::npos) continue;
        out << line << "\n";
    }
    return out.str();
}

}  // namespace

TEST_CASE("tokens subcommand reproduces the published final counts") {
    CliResult res = run_cli("tokens --preset b32 --schedule \"12@9:6@10:3@11:1 r=2 Rc=0.7 Ri=0.9\"");
    CHECK(res.exit_code == 0);
    CHECK(res.out.find("final: 1 x 97") != std::string::npos);

    res = run_cli("tokens --preset b16 --schedule \"12@9:6@10:3@11:1 r=10 Rc=0.6 Ri=0.8\" --format json");
    CHECK(res.exit_code == 0);
    const nlohmann::json doc = nlohmann::json::parse(res.out);
    CHECK(doc.at("final_token_count").get<long>() == 127);
}

TEST_CASE("malformed schedules exit with code 2 and a position") {
    const CliResult res = run_cli("tokens --preset b32 --schedule \"12@9:5\"");
    CHECK(res.exit_code == 2);
    CHECK(res.out.find("position") != std::string::npos);
}

TEST_CASE("flops subcommand hits the published numbers") {
    CliResult res = run_cli("flops --preset b32 --schedule \"12 r=0 Rc=1 Ri=1\" --format json");
    CHECK(res.exit_code == 0);
    double g = nlohmann::json::parse(res.out).at("gflops").get<double>();
    CHECK(std::abs(g - 53.0) <= 0.05 * 53.0);

    res = run_cli("flops --preset b32 --schedule \"12@9:6@10:3@11:1 r=2 Rc=0.7 Ri=0.9\" --format json");
    CHECK(res.exit_code == 0);
    g = nlohmann::json::parse(res.out).at("gflops").get<double>();
    CHECK(std::abs(g - 34.8) <= 0.10 * 34.8);
}

TEST_CASE("forward trace matches the tokens prediction and exports a merge map") {
    const std::string map_path = "/tmp/tokmerge_cli_map.json";
    std::remove(map_path.c_str());
    const CliResult fwd = run_cli(
        "forward --preset toy --seed 5 --format json --export-merge-map " + map_path);
    CHECK(fwd.exit_code == 0);
    const nlohmann::json doc = nlohmann::json::parse(fwd.out);

    const CliResult pred = run_cli("tokens --preset toy --format json");
    const nlohmann::json want = nlohmann::json::parse(pred.out);
    REQUIRE(doc.at("layers").size() == want.at("layers").size());
    for (size_t l = 0; l < doc.at("layers").size(); ++l) {
        CHECK(doc.at("layers")[l].at("tokens_after_cross") ==
              want.at("layers")[l].at("tokens_after_cross"));
        CHECK(doc.at("layers")[l].at("tokens_after_intra") ==
              want.at("layers")[l].at("tokens_after_intra"));
    }
    CHECK(doc.at("final_token_count") == want.at("final_token_count"));

    // merge map: every patch of every frame appears exactly once
    std::ifstream in(map_path);
    REQUIRE(in.good());
    const nlohmann::json map = nlohmann::json::parse(in);
    const int frames = map.at("frame_count").get<int>();
    const int patches = map.at("patches_per_frame").get<int>();
    std::vector<int> seen(static_cast<size_t>(frames) * patches, 0);
    for (const auto& tok : map.at("tokens")) {
        for (const auto& origin : tok.at("origins")) {
            const int frame = origin[0].get<int>();
            const int patch = origin[1].get<int>();
            if (patch >= 0) ++seen[static_cast<size_t>(frame) * patches + patch];
        }
    }
    for (int count : seen) CHECK(count == 1);
    std::remove(map_path.c_str());
}

TEST_CASE("forward is deterministic given a seed, modulo timing lines") {
    const CliResult a = run_cli("forward --preset toy --seed 11 --format json");
    const CliResult b = run_cli("forward --preset toy --seed 11 --format json");
    const CliResult c = run_cli("forward --preset toy --seed 11 --threads 4 --format json");
    CHECK(a.exit_code == 0);
    CHECK(scrub_timing(a.out) == scrub_timing(b.out));
    CHECK(scrub_timing(a.out) == scrub_timing(c.out));
}

TEST_CASE("ablate emits all strategy rows") {
    const CliResult res = run_cli("ablate --preset b32 --format json");
    CHECK(res.exit_code == 0);
    const nlohmann::json doc = nlohmann::json::parse(res.out);
    REQUIRE(doc.at("rows").size() == 8);
    CHECK(std::abs(doc.at("rows")[0].at("gflops").get<double>() - 34.8) <= 0.10 * 34.8);  // A0
    CHECK(std::abs(doc.at("rows")[2].at("gflops").get<double>() - 37.0) <= 0.15 * 37.0);  // 12@9:1
    CHECK(std::abs(doc.at("rows")[7].at("gflops").get<double>() - 18.1) <= 0.15 * 18.1);  // 12@1:...
}

TEST_CASE("bench validates repeats") {
    const CliResult res = run_cli("bench --preset micro --repeats 1");
    CHECK(res.exit_code == 2);
}

TEST_CASE("train runs a short deterministic session") {
    const CliResult a = run_cli("train --preset micro --pairs 8 --steps 5 --seed 7 --out /dev/stdout");
    CHECK(a.exit_code == 0);
    const nlohmann::json doc = nlohmann::json::parse(a.out);
    CHECK(doc.at("steps").get<int>() == 5);
    CHECK(doc.at("final_loss").get<double>() > 0.0);

    const CliResult b = run_cli("train --preset micro --pairs 8 --steps 5 --seed 7 --out /dev/stdout");
    CHECK(a.out == b.out);
}

TEST_CASE("JSON outputs validate against the shipped schemas") {
    struct Case {
        std::string args;
        std::string schema;
    };
    const std::vector<Case> cases = {
        {"tokens --preset b32 --format json", "token_count_report.schema.json"},
        {"flops --preset b32 --format json", "flops_report.schema.json"},
        {"forward --preset micro --seed 4 --format json", "forward_trace.schema.json"},
        {"ablate --preset b32 --format json", "ablate_report.schema.json"},
        {"bench --preset micro --batch 2 --repeats 3 --seed 5 --format json", "bench_report.schema.json"},
        {"train --preset micro --pairs 4 --steps 2 --seed 6 --out /dev/stdout",
         "train_summary.schema.json"},
    };
    for (const Case& c : cases) {
        INFO(c.args);
        const CliResult res = run_cli(c.args);
        REQUIRE(res.exit_code == 0);
        validate_against(load_schema(c.schema), nlohmann::json::parse(res.out), c.schema);
    }

    // merge map export and the per-step training log
    const std::string map_path = "/tmp/tokmerge_schema_map.json";
    REQUIRE(run_cli("forward --preset micro --seed 4 --export-merge-map " + map_path).exit_code == 0);
    std::ifstream map_in(map_path);
    REQUIRE(map_in.good());
    validate_against(load_schema("merge_map.schema.json"), nlohmann::json::parse(map_in),
                     "merge_map.schema.json");
    map_in.close();
    std::remove(map_path.c_str());

    const std::string log_path = "/tmp/tokmerge_schema_log.jsonl";
    REQUIRE(run_cli("train --preset micro --pairs 4 --steps 2 --seed 6 --out /dev/null --log " + log_path)
                .exit_code == 0);
    std::ifstream log_in(log_path);
    REQUIRE(log_in.good());
    const nlohmann::json line_schema = load_schema("train_log_line.schema.json");
    std::string line;
    int lines = 0;
    while (std::getline(log_in, line)) {
        if (line.empty()) continue;
        validate_against(line_schema, nlohmann::json::parse(line), "train_log_line");
        ++lines;
    }
    CHECK(lines == 3);  // steps 0, 1 and the post-update record
    log_in.close();
    std::remove(log_path.c_str());
}

TEST_CASE("diverging training exits with code 3") {
    const CliResult res = run_cli("train --preset micro --pairs 4 --steps 50 --seed 7 --lr 1e20");
    CHECK(res.exit_code == 3);
    CHECK(res.out.find("diverged") != std::string::npos);
}

TEST_CASE("TOKMERGE_OUTDIR anchors relative output paths") {
    const std::string dir = "/tmp/tokmerge_outdir_test";
    std::remove((dir + "/report.json").c_str());
    rmdir(dir.c_str());
    REQUIRE(mkdir(dir.c_str(), 0755) == 0);
    const CliResult res = run_cli("tokens --preset b32 --format json --out report.json",
                                  "TOKMERGE_OUTDIR=" + dir);
    CHECK(res.exit_code == 0);
    std::ifstream in(dir + "/report.json");
    REQUIRE(in.good());
    const nlohmann::json doc = nlohmann::json::parse(in);
    CHECK(doc.at("final_token_count").get<long>() == 97);
    in.close();
    std::remove((dir + "/report.json").c_str());
    rmdir(dir.c_str());
}

TEST_CASE("golden table output is stable") {
    const CliResult res = run_cli("tokens --preset b32");
    CHECK(res.exit_code == 0);
    const std::string want =
        "layer  kind   clips  group   attn    ffn\n"
        "    1  image     12      1     50     48\n"
        "    2  image     12      1     48     46\n"
        "    3  image     12      1     46     44\n"
        "    4  image     12      1     44     42\n"
        "    5  image     12      1     42     40\n"
        "    6  image     12      1     40     38\n"
        "    7  image     12      1     38     36\n"
        "    8  image     12      1     36     34\n"
        "    9  step       6      2     48     44\n"
        "   10  step       3      2     62     56\n"
        "   11  step       1      3    118    107\n"
        "   12  pass       1      1    107     97\n"
        "final: 1 x 97 (16.2% of input tokens)\n"
        "attention capacity: 118 (layer 11)\n";
    CHECK(res.out == want);
}
