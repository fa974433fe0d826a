#include "mqfuzz/oracle.hpp"

namespace mqfuzz {

namespace {

using A = AnomalyCode;

// Payload of the first publish step, for experiments that publish one
// message.
std::string first_payload_label(const Experiment& e) {
    for (const auto& s : e.steps) {
        if (const auto* p = std::get_if<step::Publish>(&s.action)) return payload_label(p->payload);
    }
    return "";
}

OutcomeSummary delivered(std::vector<DeliveryRun> runs, std::set<AnomalyCode> codes = {}) {
    OutcomeSummary s;
    s.delivered = std::move(runs);
    s.anomalies = std::move(codes);
    return s;
}

OutcomeSummary disconnected(std::set<AnomalyCode> codes = {}) {
    OutcomeSummary s;
    s.disconnected = true;
    s.anomalies = std::move(codes);
    return s;
}

BehaviorProfile build_conformant() {
    const auto corpus = builtin_corpus();
    BehaviorProfile p;
    p.broker_label = "conformant";
    for (const auto& e : corpus) {
        if (e.input == InputClass::Malformed) {
            p.outcomes[e.name] = disconnected();
        } else {
            p.outcomes[e.name] = delivered({{first_payload_label(e), 1}});
        }
    }
    p.outcomes["qos2_then_qos1_same_id"] = delivered({{"1", 1}, {"2", 1}});
    p.outcomes["qos2_then_qos0_same_id"] = delivered({{"1", 1}, {"2", 1}});
    p.outcomes["double_qos2_same_id"] = delivered({{"1", 1}});
    p.outcomes["qos0_flood"] = delivered({{"f", 10000}});
    p.outcomes["orphan_pubrel"] = delivered({});
    return p;
}

BehaviorProfile broker(std::string label, std::string version) {
    BehaviorProfile p = conformant_profile();
    p.broker_label = std::move(label);
    p.version = std::move(version);
    return p;
}

std::map<std::string, BehaviorProfile> build_documented() {
    std::map<std::string, BehaviorProfile> out;
    const std::string slashes = "slashes";
    const std::string long_payload = "long";

    {
        // Version as printed in the study's table.
        auto p = broker("Mosquitto", "1.16.12");
        p.outcomes["qos2_then_qos1_same_id"] = delivered({{"1", 1}}, {A::LostMessage});
        p.outcomes["qos2_then_qos0_same_id"] = delivered({{"2", 1}, {"1", 1}}, {A::ReorderedDelivery});
        p.outcomes["double_qos2_same_id"] = delivered({{"1", 1}});
        p.outcomes["many_slashes_topic"] = disconnected();
        out[p.broker_label] = std::move(p);
    }
    {
        auto p = broker("EMQX", "4.2.1");
        p.outcomes["qos2_then_qos1_same_id"] = delivered({{"1", 1}, {"2", 1}});
        p.outcomes["qos2_then_qos0_same_id"] = delivered({{"1", 1}, {"2", 1}});
        p.outcomes["double_qos2_same_id"] = delivered({{"1", 1}});
        p.outcomes["long_topic_5000"] = disconnected({A::UnexpectedDisconnect});
        p.outcomes["long_topic_65535"] = disconnected({A::UnexpectedDisconnect});
        p.outcomes["many_slashes_topic"] = disconnected();
        out[p.broker_label] = std::move(p);
    }
    {
        auto p = broker("HiveMQ", "2020.5");
        p.outcomes["qos2_then_qos1_same_id"] =
            delivered({{"1", 1}, {"2", 1}}, {A::AckBeforePrerequisite, A::LateCompletion});
        p.outcomes["qos2_then_qos0_same_id"] = delivered({{"1", 1}, {"2", 1}}, {A::AckBeforePrerequisite});
        p.outcomes["double_qos2_same_id"] = delivered({{"1", 1}, {"2", 1}}, {A::IdReuseMishandled});
        p.outcomes["long_topic_5000"] = delivered({{long_payload, 1}}, {A::TopicTruncation});
        p.outcomes["long_topic_65535"] = delivered({{long_payload, 1}}, {A::TopicTruncation});
        p.outcomes["many_slashes_topic"] = delivered({{slashes, 1}}, {A::TopicTruncation});
        out[p.broker_label] = std::move(p);
    }
    {
        auto p = broker("Moquette", "0.13");
        p.outcomes["qos2_then_qos1_same_id"] = delivered({{"1", 1}, {"2", 1}}, {A::LateCompletion});
        p.outcomes["qos2_then_qos0_same_id"] = delivered({{"1", 1}, {"2", 1}}, {A::LateCompletion});
        p.outcomes["double_qos2_same_id"] = delivered({{"1", 1}, {"2", 1}}, {A::IdReuseMishandled});
        p.outcomes["long_topic_5000"] = disconnected({A::UnexpectedDisconnect});
        p.outcomes["long_topic_65535"] = disconnected({A::UnexpectedDisconnect});
        p.outcomes["many_slashes_topic"] = disconnected();
        out[p.broker_label] = std::move(p);
    }
    {
        auto p = broker("Aedes", "0.43.0");
        p.outcomes["qos2_then_qos1_same_id"] = delivered({{"1", 1}, {"2", 1}}, {A::LateCompletion});
        p.outcomes["qos2_then_qos0_same_id"] =
            delivered({{"2", 1}, {"1", 1}}, {A::ReorderedDelivery, A::LateCompletion});
        p.outcomes["double_qos2_same_id"] = delivered({{"1", 2}}, {A::DuplicateDelivery, A::LateCompletion});
        p.outcomes["long_topic_5000"] = disconnected({A::BrokerCrash});
        p.outcomes["long_topic_65535"] = disconnected({A::BrokerCrash});
        p.outcomes["many_slashes_topic"] = disconnected();
        p.outcomes["orphan_pubrel"] = disconnected({A::OrphanPubrelRejected});
        out[p.broker_label] = std::move(p);
    }
    return out;
}

}  // namespace

const BehaviorProfile& conformant_profile() {
    static const BehaviorProfile p = build_conformant();
    return p;
}

const std::map<std::string, BehaviorProfile>& documented_profiles() {
    static const std::map<std::string, BehaviorProfile> profiles = build_documented();
    return profiles;
}

}  // namespace mqfuzz
