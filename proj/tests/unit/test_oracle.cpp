#include <gtest/gtest.h>

#include "mqfuzz/oracle.hpp"
#include "transcriptions.hpp"

using namespace mqfuzz;
using transcribe::TraceBuilder;

namespace {

Experiment corpus_entry(const std::string& name) {
    for (auto& e : builtin_corpus()) {
        if (e.name == name) return e;
    }
    throw std::logic_error(name);
}

ScenarioOutcome evaluate(const std::string& name, const std::string& broker) {
    const Experiment e = corpus_entry(name);
    const CorpusResult r = transcribe::transcribed_result(e, broker);
    ScenarioOutcome o = evaluate_trace(e, *r.trace);
    apply_liveness(o, e, r.liveness_after);
    return o;
}

std::vector<std::string> payloads(const ScenarioOutcome& o) {
    std::vector<std::string> out;
    for (const auto& d : o.delivered) out.push_back(to_string(d.payload));
    return out;
}

using Codes = std::set<AnomalyCode>;

}  // namespace

TEST(Rules, MosquittoLosesSecondPacket) {
    const auto o = evaluate("qos2_then_qos1_same_id", "Mosquitto");
    EXPECT_EQ(payloads(o), (std::vector<std::string>{"1"}));
    EXPECT_EQ(o.codes(), Codes{AnomalyCode::LostMessage});
}

TEST(Rules, ReverseOrderIsReordered) {
    const auto o = evaluate("qos2_then_qos0_same_id", "Mosquitto");
    EXPECT_EQ(payloads(o), (std::vector<std::string>{"2", "1"}));
    EXPECT_TRUE(o.has(AnomalyCode::ReorderedDelivery));
    EXPECT_FALSE(o.has(AnomalyCode::LostMessage));
}

TEST(Rules, SamePacketTwiceIsDuplicate) {
    const auto o = evaluate("double_qos2_same_id", "Aedes");
    EXPECT_EQ(payloads(o), (std::vector<std::string>{"1", "1"}));
    EXPECT_TRUE(o.has(AnomalyCode::DuplicateDelivery));
    EXPECT_FALSE(o.has(AnomalyCode::IdReuseMishandled));
}

TEST(Rules, RetransmissionDeliveredIsIdReuse) {
    const auto o = evaluate("double_qos2_same_id", "HiveMQ");
    EXPECT_EQ(o.codes(), Codes{AnomalyCode::IdReuseMishandled});
    EXPECT_EQ(severity_of(AnomalyCode::IdReuseMishandled), Severity::Info);
}

TEST(Rules, CrashAfterLongTopic) {
    const auto o = evaluate("long_topic_5000", "Aedes");
    EXPECT_TRUE(o.has(AnomalyCode::BrokerCrash));
    EXPECT_FALSE(o.has(AnomalyCode::UnexpectedDisconnect));
    EXPECT_TRUE(o.disconnected);
}

TEST(Rules, DisconnectOnLongTopic) {
    for (const char* b : {"EMQX", "Moquette"}) {
        const auto o = evaluate("long_topic_65535", b);
        EXPECT_EQ(o.codes(), Codes{AnomalyCode::UnexpectedDisconnect}) << b;
        EXPECT_EQ(severity_of(AnomalyCode::UnexpectedDisconnect), Severity::DoS);
    }
}

TEST(Rules, TruncatedTopic) {
    const auto o = evaluate("long_topic_5000", "HiveMQ");
    EXPECT_TRUE(o.has(AnomalyCode::TopicTruncation));
    const auto s = evaluate("many_slashes_topic", "HiveMQ");
    EXPECT_EQ(s.codes(), Codes{AnomalyCode::TopicTruncation});
}

TEST(Rules, RefusingDeepTopicIsTolerated) {
    const auto o = evaluate("many_slashes_topic", "Mosquitto");
    EXPECT_TRUE(o.disconnected);
    EXPECT_TRUE(o.codes().empty());
}

TEST(Rules, AckBeforePrerequisite) {
    const auto o = evaluate("qos2_then_qos1_same_id", "HiveMQ");
    EXPECT_TRUE(o.has(AnomalyCode::AckBeforePrerequisite));
    EXPECT_TRUE(o.has(AnomalyCode::LateCompletion));
}

TEST(Rules, OrphanPubrelClose) {
    const auto o = evaluate("orphan_pubrel", "Aedes");
    EXPECT_EQ(o.codes(), Codes{AnomalyCode::OrphanPubrelRejected});
}

TEST(Rules, MalformedAcceptedIsNoted) {
    const Experiment e = corpus_entry("bad_protocol_level");
    TraceBuilder b(e.name);
    Connect c = e.sessions[0].connect.to_packet();
    b.connected().sent(c).received(Connack{false, 0});
    const auto o = evaluate_trace(e, b.build());
    EXPECT_EQ(o.codes(), Codes{AnomalyCode::ProtocolViolationTolerated});
}

TEST(Rules, MalformedRefusalIsClean) {
    for (const auto& e : builtin_corpus()) {
        if (e.input != InputClass::Malformed) continue;
        const auto o = evaluate(e.name, "reference");
        EXPECT_TRUE(o.codes().empty()) << e.name;
        EXPECT_TRUE(o.disconnected) << e.name;
    }
}

TEST(Rules, EvidencePointsIntoTrace) {
    for (const auto& broker : transcribe::kBrokers) {
        for (const auto& r : transcribe::transcribed_corpus(broker)) {
            const auto o = evaluate_trace(r.experiment, *r.trace);
            for (const auto& a : o.anomalies) {
                EXPECT_EQ(a.severity, severity_of(a.code));
                EXPECT_FALSE(a.explanation.empty());
                for (auto seq : a.evidence) EXPECT_LT(seq, r.trace->events.size()) << broker << " " << r.experiment.name;
            }
        }
    }
}

TEST(Rules, MismatchedTraceRejected) {
    const Experiment e = corpus_entry("orphan_pubrel");
    TraceBuilder b("something_else");
    b.connected();
    EXPECT_THROW(evaluate_trace(e, b.build()), TraceMismatch);
}

TEST(Rules, Deterministic) {
    for (const auto& r : transcribe::transcribed_corpus("Aedes")) {
        const auto a = summarize(evaluate_trace(r.experiment, *r.trace));
        const auto b = summarize(evaluate_trace(r.experiment, *r.trace));
        EXPECT_EQ(a, b);
    }
}

TEST(Transcriptions, ReproduceDocumentedProfiles) {
    const auto& documented = documented_profiles();
    ASSERT_EQ(documented.size(), transcribe::kBrokers.size());
    for (const auto& broker : transcribe::kBrokers) {
        const BehaviorProfile got = fingerprint(broker, transcribe::transcribed_corpus(broker));
        const BehaviorProfile& want = documented.at(broker);
        for (const auto& [name, summary] : want.outcomes) {
            ASSERT_TRUE(got.outcomes.count(name)) << broker << " " << name;
            const auto& g = got.outcomes.at(name);
            EXPECT_EQ(g.anomalies, summary.anomalies) << broker << " " << name;
            EXPECT_EQ(g.delivered, summary.delivered)
                << broker << " " << name << ": " << describe_delivered(g.delivered) << " vs "
                << describe_delivered(summary.delivered);
            EXPECT_EQ(g.disconnected, summary.disconnected) << broker << " " << name;
        }
        EXPECT_TRUE(diff_profiles(got, want).empty()) << broker;
    }
}

TEST(Transcriptions, ReferenceHasNoFalsePositives) {
    const BehaviorProfile got = fingerprint("reference", transcribe::transcribed_corpus("reference"));
    for (const auto& [name, s] : got.outcomes) EXPECT_TRUE(s.anomalies.empty()) << name;
    EXPECT_TRUE(diff_profiles(got, conformant_profile()).empty());
}

TEST(Severity, Mapping) {
    EXPECT_EQ(severity_of(AnomalyCode::BrokerCrash), Severity::DoS);
    EXPECT_EQ(severity_of(AnomalyCode::LostMessage), Severity::Warning);
    EXPECT_EQ(severity_of(AnomalyCode::DuplicateDelivery), Severity::Warning);
    EXPECT_EQ(severity_of(AnomalyCode::ReorderedDelivery), Severity::Warning);
    EXPECT_EQ(severity_of(AnomalyCode::LateCompletion), Severity::Warning);
    EXPECT_EQ(severity_of(AnomalyCode::ProtocolViolationTolerated), Severity::Info);
    EXPECT_LT(Severity::Info, Severity::Warning);
    EXPECT_LT(Severity::Warning, Severity::DoS);
    EXPECT_LT(Severity::DoS, Severity::Critical);
}

TEST(Severity, NamesRoundTrip) {
    for (auto code : all_anomaly_codes()) EXPECT_EQ(anomaly_code_from_string(to_string(code)), code);
    for (auto s : {Severity::Info, Severity::Warning, Severity::DoS, Severity::Critical}) {
        EXPECT_EQ(severity_from_string(to_string(s)), s);
    }
    EXPECT_FALSE(severity_from_string("loud"));
}

TEST(Diff, SameProfileIsEmpty) {
    const auto& p = documented_profiles().at("Aedes");
    EXPECT_TRUE(diff_profiles(p, p).empty());
}

TEST(Diff, MosquittoVsEmqx) {
    const auto& d = documented_profiles();
    const auto divergences = diff_profiles(d.at("Mosquitto"), d.at("EMQX"));
    bool found = false;
    for (const auto& x : divergences) {
        if (x.experiment == "qos2_then_qos1_same_id" && x.description.find("delivered {1} vs {1,2}") != std::string::npos) {
            found = true;
        }
    }
    EXPECT_TRUE(found);
}

TEST(Diff, DisjointCorporaThrow) {
    BehaviorProfile a{"a", "", {{"x", {}}}};
    BehaviorProfile b{"b", "", {{"y", {}}}};
    EXPECT_THROW(diff_profiles(a, b), NoOverlap);
}

TEST(Diff, SkippedVsRan) {
    BehaviorProfile a{"a", "", {{"x", {}}}};
    BehaviorProfile b = a;
    b.outcomes["x"].skipped = true;
    const auto d = diff_profiles(a, b);
    ASSERT_EQ(d.size(), 1u);
}

TEST(Fingerprint, DeadBrokerSkipsAndCrashes) {
    auto results = transcribe::transcribed_corpus("reference");
    results[3].liveness_after = {false, "connection refused"};
    for (std::size_t i = 4; i < results.size(); ++i) {
        results[i].trace.reset();
        results[i].skipped_reason = "broker_dead";
    }
    const auto p = fingerprint("x", results);
    EXPECT_TRUE(p.outcomes.at(results[3].experiment.name).anomalies.count(AnomalyCode::BrokerCrash));
    EXPECT_TRUE(p.outcomes.at(results[5].experiment.name).skipped);
}

TEST(Json, ProfileShape) {
    const auto j = profile_to_json(documented_profiles().at("Mosquitto"));
    EXPECT_EQ(j.at("broker"), "Mosquitto");
    EXPECT_TRUE(j.at("outcomes").contains("qos2_then_qos1_same_id"));
}
