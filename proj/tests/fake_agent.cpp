// Scripted external agent for tests. Reads calm-agent/1 requests on stdin
// and replies according to the mode given as the first argument:
//   always-positive   every case gets the positive label
//   mismatched-id     echoes a wrong case id
//   hang              never replies
//   garbage           replies with text that is not JSON
//   exit-early        exits after the first reply
//   rule <cue>        positive when the numeric cue is > 0, with stated tiers
//   guided            positive when guidance text was supplied

#include <nlohmann/json.hpp>

#include <chrono>
#include <iostream>
#include <string>
#include <thread>

int main(int argc, char** argv) {
  const std::string mode = argc > 1 ? argv[1] : "always-positive";
  const std::string cue = argc > 2 ? argv[2] : "x1";
  std::string line;
  int served = 0;
  while (std::getline(std::cin, line)) {
    const auto req = nlohmann::json::parse(line);
    const std::string pos = req["labels"]["positive"];
    const std::string neg = req["labels"]["negative"];
    nlohmann::json reply;
    reply["case_id"] = req["case_id"];
    if (mode == "hang") {
      std::this_thread::sleep_for(std::chrono::hours(1));
    } else if (mode == "garbage") {
      std::cout << "not json at all" << std::endl;
      continue;
    } else if (mode == "mismatched-id") {
      reply["case_id"] = "wrong-" + req["case_id"].get<std::string>();
      reply["decision"] = pos;
    } else if (mode == "rule") {
      reply["decision"] = req["cue_values"][cue].get<double>() > 0 ? pos : neg;
      reply["stated_tiers"] = {{cue, "HIGH"}};
    } else if (mode == "guided") {
      reply["decision"] = req["guidance"].is_string() ? pos : neg;
    } else {
      reply["decision"] = pos;
    }
    std::cout << reply.dump() << std::endl;
    if (mode == "exit-early" && ++served == 1) return 0;
  }
  return 0;
}
