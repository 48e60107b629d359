from pedalign.schema import Conversation, ConversationTurn, TutorAnnotation

EVAL_FOR_ACTION = {1: "a", 2: "a", 3: "b", 4: "c", 5: "c"}


def ann(action=1, eval_code=None, substate="x", subproblem="s1", utterance="Here is a hint."):
    return TutorAnnotation(eval_code or EVAL_FOR_ACTION.get(action, "d"), action, substate, subproblem, utterance)


def conv(actions, conv_id="c1", question="Q?", subproblem="s1"):
    turns = tuple(
        ConversationTurn(i, f"student says {i}", ann(a, subproblem=subproblem, utterance=f"tutor turn {i}"))
        for i, a in enumerate(actions, start=1)
    )
    return Conversation(conv_id, question, turns)
